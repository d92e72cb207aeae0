"""Benchmark sweeps over loss forms and seeds, and the consolidated report.

A sweep writes a plain-text artifact tree::

    config.json
    runs/<loss>/seed<s>/metrics.csv          per-level metrics
    runs/<loss>/seed<s>/log.csv              per-epoch loss and validation accuracy
    runs/<loss>/seed<s>/feature_norm.csv     per-level (norm, ECE) pairs
    runs/<loss>/seed<s>/multipliers.txt      MaxEnt forms only
    runs/<loss>/seed<s>/predictions/level<L>.csv   raw test logits
    runs/<loss>/seed<s>/temperature.txt, metrics_ts.csv   with a temperature grid
    ablation/seed<s>.csv, ablation/summary.csv
    report.csv

Nothing in the tree depends on wall-clock time or worker scheduling, so
identical configs give byte-identical trees.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .adhoc import fit_temperature
from .losses import BASES, LossForm
from .metrics import METRIC_NAMES, PredictionSet, all_metrics, write_predictions
from .trainer import (
    ShiftSpec,
    SyntheticDataset,
    TrainConfig,
    ablate_local_constraints,
    evaluate_across_shifts,
    feature_norm_study,
    generate_blobs,
    train,
)

ARTIFACTS_ENV = "MAXENT_ARTIFACTS"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


class ReportError(ValueError):
    pass


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


@dataclass(frozen=True)
class SweepConfig:
    losses: tuple[str, ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    gamma: float = 1.0
    label_smoothing: float = 0.0
    include_local: bool = True
    base: str = "ce_entropy"
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.05
    hidden: int = 64
    solver_tol: float = 1e-15
    k: int = 10
    d_in: int = 20
    n_per_class: int = 300
    center_scale: float = 0.6
    data_seed: int = 1234
    prior: tuple[float, ...] | None = None
    noise_scales: tuple[float, ...] = ShiftSpec().noise_scales
    bins: int = 15
    ablation_loss: str | None = "maxent_mean"
    temperature_grid: tuple[float, ...] | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> SweepConfig:
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        if "losses" not in raw:
            raise ConfigError("losses", "required field is missing")
        values = dict(raw)
        for name in ("losses", "seeds", "prior", "noise_scales", "temperature_grid"):
            if values.get(name) is not None:
                if not isinstance(values[name], list):
                    raise ConfigError(name, "must be a list")
                values[name] = tuple(values[name])
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> SweepConfig:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(raw)

    def validate(self) -> None:
        def check(name, ok, message):
            if not ok:
                raise ConfigError(name, message)

        check("losses", len(self.losses) > 0, "needs at least one loss form")
        valid = [f.value for f in LossForm]
        for loss in self.losses:
            check("losses", loss in valid, f"unknown loss {loss!r}; choose from {valid}")
        check("losses", len(set(self.losses)) == len(self.losses), "duplicate loss form")
        check("seeds", len(self.seeds) > 0, "needs at least one seed")
        check("seeds", all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds),
              "seeds must be non-negative integers")
        check("seeds", len(set(self.seeds)) == len(self.seeds), "duplicate seed")
        check("gamma", _is_num(self.gamma) and self.gamma >= 0, "must be a number >= 0")
        check("label_smoothing", _is_num(self.label_smoothing) and 0 <= self.label_smoothing < 1,
              "must be in [0, 1)")
        check("include_local", isinstance(self.include_local, bool), "must be true or false")
        check("base", self.base in BASES, f"must be one of {list(BASES)}")
        for name in ("epochs", "batch_size", "hidden", "k", "d_in", "n_per_class", "bins"):
            value = getattr(self, name)
            check(name, isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                  "must be a positive integer")
        check("k", self.k >= 2, "needs at least 2 classes")
        check("n_per_class", self.n_per_class >= 10, "must be at least 10")
        check("data_seed", isinstance(self.data_seed, int) and self.data_seed >= 0, "must be a non-negative integer")
        check("learning_rate", _is_num(self.learning_rate) and self.learning_rate >= 0, "must be a number >= 0")
        check("solver_tol", _is_num(self.solver_tol) and self.solver_tol > 0, "must be a positive number")
        check("center_scale", _is_num(self.center_scale) and self.center_scale > 0, "must be a positive number")
        if self.prior is not None:
            check("prior", len(self.prior) == self.k and all(_is_num(p) and p >= 0 for p in self.prior),
                  f"must list {self.k} non-negative numbers")
            check("prior", abs(sum(self.prior) - 1.0) <= 1e-6, "must sum to 1")
        try:
            ShiftSpec(self.noise_scales)
        except (ValueError, TypeError) as exc:
            raise ConfigError("noise_scales", str(exc)) from None
        if self.ablation_loss is not None:
            form = LossForm(self.ablation_loss) if self.ablation_loss in valid else None
            check("ablation_loss", form is not None and form.constraint_form is not None,
                  "must name a MaxEnt loss form or be null")
        if self.temperature_grid is not None:
            check("temperature_grid", len(self.temperature_grid) > 0
                  and all(_is_num(t) and t > 0 for t in self.temperature_grid), "must list positive numbers")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @property
    def shift(self) -> ShiftSpec:
        return ShiftSpec(self.noise_scales)

    def dataset(self) -> SyntheticDataset:
        return generate_blobs(self.k, self.d_in, self.n_per_class, self.data_seed, self.prior, self.center_scale)

    def train_config(self, loss: str, seed: int) -> TrainConfig:
        return TrainConfig(loss=loss, gamma=self.gamma, include_local=self.include_local,
                           label_smoothing=self.label_smoothing, epochs=self.epochs,
                           batch_size=self.batch_size, learning_rate=self.learning_rate, hidden=self.hidden,
                           seed=seed, solver_tol=self.solver_tol, base=self.base)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def metrics_csv(rows: list[tuple[int, float, dict[str, float]]]) -> str:
    lines = ["level,noise_scale," + ",".join(METRIC_NAMES)]
    for level, scale, m in rows:
        lines.append(f"{level},{_fmt(scale)}," + ",".join(_fmt(m[name]) for name in METRIC_NAMES))
    return "\n".join(lines) + "\n"


def run_dir(root: Path, loss: str, seed: int) -> Path:
    return root / "runs" / loss / f"seed{seed}"


def _run_one(args: tuple[SweepConfig, str, int, str]) -> None:
    cfg, loss, seed, root = args
    out = run_dir(Path(root), loss, seed)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset()
    spec = cfg.shift
    model, log = train(ds, cfg.train_config(loss, seed))
    (out / "log.csv").write_text(log.to_csv(), encoding="utf-8")
    if log.multipliers is not None:
        (out / "multipliers.txt").write_text("\n".join(log.multipliers.report_lines()) + "\n", encoding="utf-8")

    results = evaluate_across_shifts(model, ds, spec, cfg.bins, seed)
    (out / "metrics.csv").write_text(
        metrics_csv([(r.level, spec.noise_scales[r.level], r.metrics) for r in results]), encoding="utf-8")
    for r in results:
        write_predictions(out / "predictions" / f"level{r.level}.csv", r.logits, r.labels)
    norms = feature_norm_study(model, ds, spec, cfg.bins, seed)
    (out / "feature_norm.csv").write_text(
        "level,feature_norm,ece\n" + "".join(f"{lv},{_fmt(n)},{_fmt(e)}\n" for lv, n, e in norms), encoding="utf-8")

    if cfg.temperature_grid is not None:
        val = ds.subset("val")
        fit = fit_temperature(model.logits(val.features), val.labels, cfg.temperature_grid)
        lines = [f"t={_fmt(t)} nll={_fmt(v)}" for t, v in zip(fit.grid, fit.nll_at_t)]
        lines.append(f"chosen_t={_fmt(fit.chosen_t)}")
        (out / "temperature.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        rows = [(r.level, spec.noise_scales[r.level],
                 all_metrics(PredictionSet.from_logits(r.logits / fit.chosen_t, r.labels), cfg.bins))
                for r in results]
        (out / "metrics_ts.csv").write_text(metrics_csv(rows), encoding="utf-8")


def _run_ablation(args: tuple[SweepConfig, int, str]) -> None:
    cfg, seed, root = args
    curves = ablate_local_constraints(cfg.dataset(), cfg.train_config(cfg.ablation_loss, seed), cfg.shift, cfg.bins)
    lines = ["level,global_only_ece,global_local_ece"]
    lines += [f"{lv},{_fmt(g)},{_fmt(gl)}"
              for lv, (g, gl) in enumerate(zip(curves["global_only"], curves["global_local"]))]
    (Path(root) / "ablation" / f"seed{seed}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _map(fn, tasks, jobs: int) -> None:
    if jobs <= 1:
        for t in tasks:
            fn(t)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(fn, tasks))


def run_sweep(cfg: SweepConfig, root: str | Path, jobs: int = 1) -> Path:
    """Train every (loss, seed) pair, evaluate across shifts and write the artifact tree."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    _map(_run_one, [(cfg, loss, seed, str(root)) for loss in cfg.losses for seed in cfg.seeds], jobs)
    if cfg.ablation_loss is not None:
        (root / "ablation").mkdir(exist_ok=True)
        _map(_run_ablation, [(cfg, seed, str(root)) for seed in cfg.seeds], jobs)
        (root / "ablation" / "summary.csv").write_text(ablation_summary(root), encoding="utf-8")
    (root / "report.csv").write_text(report(root), encoding="utf-8")
    return root


def mean_se(values: list[float]) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); the error is nan for one value."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    if arr.size == 1:
        return float(arr[0]), math.nan
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def read_table(path: Path) -> tuple[list[str], list[list[float]]]:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ReportError(f"{path}: empty table")
    header = lines[0].split(",")
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ReportError(f"{path}: line {lineno}: expected {len(header)} fields, found {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ReportError(f"{path}: line {lineno}: non-numeric value") from None
    return header, rows


def _loss_order(root: Path) -> list[str]:
    runs = root / "runs"
    if not runs.is_dir():
        raise ReportError(f"{root}: no runs directory")
    present = sorted(p.name for p in runs.iterdir() if p.is_dir())
    try:
        configured = list(json.loads((root / "config.json").read_text(encoding="utf-8"))["losses"])
    except (OSError, ValueError, KeyError):
        configured = []
    return [l for l in configured if l in present] + [l for l in present if l not in configured]


def _seed_tables(root: Path, loss: str, name: str) -> dict[int, dict[int, list[float]]]:
    """``{seed: {level: metric row}}`` for one loss."""
    out = {}
    for seed_dir in sorted((root / "runs" / loss).iterdir()):
        if not seed_dir.is_dir() or not seed_dir.name.startswith("seed"):
            continue
        path = seed_dir / name
        if not path.is_file():
            if name != "metrics.csv":
                continue
            raise ReportError(f"{seed_dir}: missing {name}")
        header, rows = read_table(path)
        if header != ["level", "noise_scale", *METRIC_NAMES]:
            raise ReportError(f"{path}: unexpected header")
        out[int(seed_dir.name[4:])] = {int(r[0]): r[2:] for r in rows}
    return out


def report(root: str | Path) -> str:
    """Per-loss mean and standard error over seeds at every level present, plus a level-average row."""
    root = Path(root)
    cols = ",".join(f"{m}_mean,{m}_se" for m in METRIC_NAMES)
    lines = [f"loss,level,seeds,{cols}"]
    losses = _loss_order(root)
    if not losses:
        raise ReportError(f"{root}: no runs")
    for loss in losses:
        for suffix, name in (("", "metrics.csv"), ("+ts", "metrics_ts.csv")):
            tables = _seed_tables(root, loss, name)
            if not tables:
                if name == "metrics.csv":
                    raise ReportError(f"{root / 'runs' / loss}: no seed runs")
                continue
            levels = sorted({lv for t in tables.values() for lv in t})
            for lv in levels:
                rows = [t[lv] for t in tables.values() if lv in t]
                stats = [mean_se([r[i] for r in rows]) for i in range(len(METRIC_NAMES))]
                lines.append(f"{loss}{suffix},{lv},{len(rows)}," + ",".join(f"{_fmt(m)},{_fmt(s)}" for m, s in stats))
            per_seed = [np.mean(list(t.values()), axis=0) for t in tables.values() if t]
            stats = [mean_se([r[i] for r in per_seed]) for i in range(len(METRIC_NAMES))]
            lines.append(f"{loss}{suffix},mean,{len(per_seed)}," + ",".join(f"{_fmt(m)},{_fmt(s)}" for m, s in stats))
    return "\n".join(lines) + "\n"


def ablation_summary(root: str | Path) -> str:
    root = Path(root)
    files = sorted((root / "ablation").glob("seed*.csv"))
    if not files:
        raise ReportError(f"{root}: no ablation results")
    by_level: dict[int, list[list[float]]] = {}
    for path in files:
        _, rows = read_table(path)
        for r in rows:
            by_level.setdefault(int(r[0]), []).append(r[1:])
    lines = ["level,seeds,global_only_mean,global_only_se,global_local_mean,global_local_se"]
    for lv in sorted(by_level):
        rows = by_level[lv]
        g, gl = mean_se([r[0] for r in rows]), mean_se([r[1] for r in rows])
        lines.append(f"{lv},{len(rows)},{_fmt(g[0])},{_fmt(g[1])},{_fmt(gl[0])},{_fmt(gl[1])}")
    return "\n".join(lines) + "\n"


def default_root() -> Path:
    return Path(os.environ.get(ARTIFACTS_ENV, "artifacts"))
