"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 input-format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .adhoc import DEFAULT_TEMPERATURE_GRID, fit_temperature, label_smooth, parse_grid, temperature_scale
from .losses import precompute_multipliers
from .metrics import (
    DIAGRAM_BINS,
    TABLE_BINS,
    PredictionFileError,
    all_metrics,
    bin_strength,
    format_metrics,
    read_predictions,
    read_records,
    reliability_bins,
    write_predictions,
)
from .solver import (
    Form,
    LabelSpace,
    PriorFileError,
    SolverError,
    gibbs_pmf,
    global_moments,
    moment_targets,
    read_prior,
    solve_joint,
    solve_mean,
    solve_normalized,
    solve_variance,
)
from .sweep import ConfigError, ReportError, SweepConfig, _run_one, default_root, report, run_sweep
from .trainer import TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_prior(args):
    try:
        return read_prior(args.prior, counts=args.counts)
    except OSError as exc:
        raise InputError(f"cannot read prior file: {exc}") from None


def cmd_solve(args) -> int:
    prior = _load_prior(args)
    ls = LabelSpace(prior.k_count)
    form = Form(args.form)
    g = global_moments(prior, ls)
    lines = [f"k={ls.k_count}", f"mu_global={g.mu_global:.6f}", f"sigma2_global={g.sigma2_global:.6f}"]
    if args.normalized:
        dist = solve_normalized(g, form, ls, args.tol)
        lines += dist.solution.report_lines()
        lines += [f"p{k}={p:.6f}" for k, p in enumerate(dist.weights)]
    else:
        include_local = not args.global_only
        targets = None
        if args.label_smoothing > 0:
            targets = label_smooth(np.eye(ls.k_count), args.label_smoothing)
        sol = precompute_multipliers(prior, ls, form, include_local, targets, args.tol)
        lines.append(f"include_local={str(include_local).lower()}")
        if args.label is not None:
            if not include_local:
                raise UsageError("--class needs local constraints (drop --global-only)")
            if not 0 <= args.label < ls.k_count:
                raise UsageError(f"--class must be in [0, {ls.k_count - 1}]")
            sol = sol.for_label(args.label)
            lines.append(f"class={args.label}")
        lines += sol.report_lines()
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def pmf_table(probs: np.ndarray) -> str:
    return "class,probability\n" + "".join(f"{k},{p:.6f}\n" for k, p in enumerate(probs))


def cmd_pmf(args) -> int:
    ls = LabelSpace(args.k)
    mu = (args.k - 1) / 2 if args.mu is None else args.mu
    form = args.form
    if form is None:
        form = {(False, False): "none", (True, False): "mean", (False, True): "variance",
                (True, True): "joint"}[(args.mu is not None, args.sigma2 is not None)]
    if form in ("variance", "joint") and args.sigma2 is None:
        raise UsageError(f"--form {form} needs --sigma2")
    if form == "none":
        probs = np.full(args.k, 1.0 / args.k)
    elif args.normalize:
        sigma2 = 0.0 if args.sigma2 is None else args.sigma2
        probs = solve_normalized(moment_targets(mu, sigma2, ls), form, ls, args.tol).weights
    else:
        if form == "mean":
            sol = solve_mean(mu, ls, args.tol)
        elif form == "variance":
            sol = solve_variance(args.sigma2 + mu * mu, ls, args.tol)
        else:
            sol = solve_joint(mu, args.sigma2, ls, args.tol)
        probs = gibbs_pmf(sol, ls, normalize=True).weights
    _emit(pmf_table(probs), args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        ps = read_predictions(args.predictions, logits=args.logits)
    except OSError as exc:
        raise InputError(f"cannot read predictions: {exc}") from None
    if args.bins < 1 or args.diagram_bins < 1:
        raise UsageError("bin counts must be positive")
    out = [f"records={len(ps)}", f"bins={args.bins}"]
    text = "\n".join(out) + "\n" + format_metrics(all_metrics(ps, args.bins, args.kse_variant))
    stats = reliability_bins(ps, args.diagram_bins)
    strength = bin_strength(ps, args.diagram_bins)
    text += "\n[reliability]\nbin,lower,upper,count,accuracy,confidence,strength\n"
    for b in range(stats.n_bins):
        acc = "" if stats.counts[b] == 0 else f"{stats.accuracy[b]:.6f}"
        conf = "" if stats.counts[b] == 0 else f"{stats.confidence[b]:.6f}"
        text += (f"{b},{stats.lower[b]:.6f},{stats.upper[b]:.6f},{stats.counts[b]},"
                 f"{acc},{conf},{strength[b]:.6f}\n")
    _emit(text, args.out)
    return EXIT_OK


def cmd_temp_fit(args) -> int:
    grid = parse_grid(args.temperature_grid) if args.temperature_grid else DEFAULT_TEMPERATURE_GRID
    try:
        raw, labels = read_records(args.predictions)
    except OSError as exc:
        raise InputError(f"cannot read predictions: {exc}") from None
    fit = fit_temperature(raw, labels, grid)
    lines = [f"t={t:.6f} nll={v:.6f}" for t, v in zip(fit.grid, fit.nll_at_t)]
    lines.append(f"chosen_t={fit.chosen_t:.6f}")
    if args.apply:
        if not args.scaled_out:
            raise UsageError("--apply needs --scaled-out")
        try:
            logits, test_labels = read_records(args.apply)
        except OSError as exc:
            raise InputError(f"cannot read predictions: {exc}") from None
        write_predictions(args.scaled_out, temperature_scale(logits, fit.chosen_t), test_labels)
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_smooth(args) -> int:
    if not 0 <= args.label_smoothing < 1:
        raise UsageError("--label-smoothing must be in [0, 1)")
    if args.labels:
        try:
            raw = [ln.strip() for ln in Path(args.labels).read_text(encoding="utf-8").splitlines()]
        except OSError as exc:
            raise InputError(f"cannot read labels: {exc}") from None
        labels = []
        for lineno, ln in enumerate(raw, start=1):
            if not ln:
                continue
            try:
                lab = int(ln)
            except ValueError:
                raise InputError(f"line {lineno}: label {ln!r} is not an integer") from None
            if not 0 <= lab < args.k:
                raise InputError(f"line {lineno}: label {lab} outside [0, {args.k - 1}]")
            labels.append(lab)
    else:
        labels = list(range(args.k))
    targets = label_smooth(np.eye(args.k)[labels], args.label_smoothing, args.k)
    text = "label," + ",".join(f"v{i}" for i in range(args.k)) + "\n"
    text += "".join(f"{lab}," + ",".join(f"{v:.6f}" for v in row) + "\n" for lab, row in zip(labels, targets))
    _emit(text, args.out)
    return EXIT_OK


def _load_config(path):
    try:
        return SweepConfig.load(path)
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    loss = args.loss or cfg.losses[0]
    if loss not in cfg.losses:
        raise UsageError(f"loss {loss!r} is not listed in the config")
    seed = cfg.seeds[0] if args.seed is None else args.seed
    root = Path(args.out) if args.out else default_root()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    _run_one((cfg, loss, seed, str(root)))
    print(f"wrote {root / 'runs' / loss / f'seed{seed}'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    root = run_sweep(cfg, Path(args.out) if args.out else default_root(), args.jobs)
    print(f"wrote {root}")
    return EXIT_OK


def _canonical_cell(cell: str) -> str:
    try:
        return str(int(cell))
    except ValueError:
        pass
    try:
        return f"{float(cell):.6f}"
    except ValueError:
        return cell


def reformat_table(text: str) -> str:
    """Re-emit a comma-separated table in the canonical fixed-precision format."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InputError("table is empty")
    width = len(lines[0].split(","))
    out = [lines[0]]
    for lineno, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != width:
            raise InputError(f"line {lineno}: expected {width} fields, found {len(cells)}")
        out.append(",".join(_canonical_cell(c) for c in cells))
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    path = Path(args.path) if args.path else default_root()
    if path.is_dir():
        text = report(path)
    elif path.is_file():
        text = reformat_table(path.read_text(encoding="utf-8"))
    else:
        raise InputError(f"{path}: no such file or directory")
    _emit(text, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maxent-calib", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve Lagrange multipliers for a class prior")
    s.add_argument("prior", help="prior file: one value per line, '#' comments allowed")
    s.add_argument("--counts", action="store_true", help="values are class counts, not probabilities")
    s.add_argument("--form", choices=[f.value for f in Form], default="mean")
    s.add_argument("--class", dest="label", type=int, help="report only this ground-truth class")
    s.add_argument("--global-only", action="store_true", help="solve on the global moments alone")
    s.add_argument("--label-smoothing", type=float, default=0.0, help="smooth the local targets")
    s.add_argument("--normalized", action="store_true", help="proper pmf matching the global moments")
    s.add_argument("--tol", type=float, default=1e-15)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("pmf", help="maximum-entropy pmf table for given moments")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--mu", type=float)
    s.add_argument("--sigma2", type=float)
    s.add_argument("--form", choices=["none", "mean", "variance", "joint"])
    s.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--tol", type=float, default=1e-15)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pmf)

    s = sub.add_parser("calibrate", help="calibration metrics for a prediction file")
    s.add_argument("predictions")
    s.add_argument("--bins", type=int, default=TABLE_BINS)
    s.add_argument("--diagram-bins", type=int, default=DIAGRAM_BINS)
    s.add_argument("--logits", action="store_true", help="rows hold logits rather than probabilities")
    s.add_argument("--kse-variant", choices=["max", "mean"], default="max")
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("temp-fit", help="fit a temperature on validation logits")
    s.add_argument("predictions", help="validation logits file")
    s.add_argument("--temperature-grid", help="comma-separated temperatures")
    s.add_argument("--apply", help="test logits file to rescale with the chosen temperature")
    s.add_argument("--scaled-out", help="where to write the rescaled probabilities")
    s.add_argument("--out")
    s.set_defaults(func=cmd_temp_fit)

    s = sub.add_parser("smooth", help="label-smoothed target vectors")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--label-smoothing", type=float, required=True)
    s.add_argument("--labels", help="file with one integer label per line (default: every class)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("train", help="train one (loss, seed) run from a sweep config")
    s.add_argument("--config", required=True)
    s.add_argument("--loss")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="artifacts root (default $MAXENT_ARTIFACTS or ./artifacts)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run every loss and seed in a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="artifacts root (default $MAXENT_ARTIFACTS or ./artifacts)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="mean and standard error table, or re-emit a table file")
    s.add_argument("path", nargs="?", help="artifacts directory or table file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, PriorFileError, PredictionFileError, ConfigError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
