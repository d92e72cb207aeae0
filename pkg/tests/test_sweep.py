import json
import math

import pytest

from maxent_calib.metrics import METRIC_NAMES, all_metrics, read_predictions
from maxent_calib.sweep import (
    ARTIFACTS_ENV,
    ConfigError,
    ReportError,
    SweepConfig,
    default_root,
    mean_se,
    report,
    run_sweep,
)

TINY = {"losses": ["ce", "maxent_mean"], "seeds": [0, 1], "epochs": 3, "n_per_class": 20,
        "noise_scales": [0.0, 0.5, 1.0]}


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    cfg = SweepConfig.from_dict(dict(TINY, temperature_grid=[1.25, 1.5]))
    return run_sweep(cfg, root / "a"), cfg


def test_config_requires_losses():
    with pytest.raises(ConfigError) as info:
        SweepConfig.from_dict({"seeds": [0]})
    assert info.value.field == "losses"


@pytest.mark.parametrize("field,value", [
    ("losses", ["ce", "hinge"]), ("losses", "ce"), ("seeds", [0, 0]), ("seeds", [-1]),
    ("gamma", -1), ("label_smoothing", 1.0), ("epochs", 0), ("batch_size", 1.5),
    ("noise_scales", [0.5, 1.0]), ("prior", [0.5, 0.5]), ("ablation_loss", "ce"),
    ("temperature_grid", [0.0]), ("base", "x"), ("include_local", "yes"), ("bogus", 1),
])
def test_config_field_errors(field, value):
    with pytest.raises(ConfigError) as info:
        SweepConfig.from_dict(dict(TINY, **{field: value}))
    assert info.value.field == field
    assert repr(field) in str(info.value)


def test_config_load_reports_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        SweepConfig.load(path)


def test_config_round_trip():
    cfg = SweepConfig.from_dict(TINY)
    assert SweepConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_sweep_writes_the_tree(swept):
    root, cfg = swept
    for loss in cfg.losses:
        for seed in cfg.seeds:
            run = root / "runs" / loss / f"seed{seed}"
            for name in ("metrics.csv", "log.csv", "feature_norm.csv", "metrics_ts.csv", "temperature.txt"):
                assert (run / name).is_file()
            assert sorted(p.name for p in (run / "predictions").iterdir()) == [
                "level0.csv", "level1.csv", "level2.csv"]
    assert (root / "runs" / "maxent_mean" / "seed0" / "multipliers.txt").is_file()
    assert not (root / "runs" / "ce" / "seed0" / "multipliers.txt").exists()
    assert (root / "ablation" / "summary.csv").is_file()
    assert (root / "report.csv").read_text() == report(root)


def test_sweep_is_byte_identical(swept, tmp_path):
    root, cfg = swept
    again = run_sweep(cfg, tmp_path / "b", jobs=2)
    assert tree(root) == tree(again)


def test_metrics_rederive_from_predictions(swept):
    root, cfg = swept
    run = root / "runs" / "maxent_mean" / "seed1"
    lines = (run / "metrics.csv").read_text().splitlines()
    for line in lines[1:]:
        fields = line.split(",")
        level = int(fields[0])
        values = all_metrics(read_predictions(run / "predictions" / f"level{level}.csv", logits=True), cfg.bins)
        assert fields[2:] == [f"{values[m]:.6f}" for m in METRIC_NAMES]


def _fake_run(root, loss, seed, rows):
    run = root / "runs" / loss / f"seed{seed}"
    run.mkdir(parents=True)
    lines = ["level,noise_scale," + ",".join(METRIC_NAMES)]
    for level, value in rows:
        lines.append(f"{level},0.000000," + ",".join(f"{value:.6f}" for _ in METRIC_NAMES))
    (run / "metrics.csv").write_text("\n".join(lines) + "\n")


def test_report_hand_arithmetic(tmp_path):
    _fake_run(tmp_path, "ce", 0, [(0, 0.1), (1, 0.3)])
    _fake_run(tmp_path, "ce", 1, [(0, 0.2), (1, 0.5)])
    rows = [ln.split(",") for ln in report(tmp_path).splitlines()]
    header = rows[0]
    by_level = {r[1]: dict(zip(header, r)) for r in rows[1:]}
    # level 0: mean 0.15, sample std 0.0707107, SE = std / sqrt(2) = 0.05
    assert by_level["0"]["ece_mean"] == "0.150000" and by_level["0"]["ece_se"] == "0.050000"
    assert by_level["1"]["ece_mean"] == "0.400000" and by_level["1"]["ece_se"] == "0.100000"
    # level average per seed: 0.2 and 0.35
    assert by_level["mean"]["ece_mean"] == "0.275000" and by_level["mean"]["ece_se"] == "0.075000"
    assert by_level["0"]["seeds"] == "2"


def test_report_identical_seeds_have_zero_error(tmp_path):
    for seed in range(3):
        _fake_run(tmp_path, "focal", seed, [(0, 0.25)])
    row = report(tmp_path).splitlines()[1].split(",")
    assert row[3:5] == ["0.250000", "0.000000"]


def test_report_uses_only_levels_present(tmp_path):
    _fake_run(tmp_path, "ce", 0, [(0, 0.1), (2, 0.3)])
    _fake_run(tmp_path, "ce", 1, [(0, 0.3)])
    levels = [ln.split(",")[1:3] for ln in report(tmp_path).splitlines()[1:]]
    assert levels == [["0", "2"], ["2", "1"], ["mean", "2"]]


def test_report_incomplete_artifacts(tmp_path):
    with pytest.raises(ReportError):
        report(tmp_path)
    (tmp_path / "runs" / "ce" / "seed0").mkdir(parents=True)
    with pytest.raises(ReportError):
        report(tmp_path)


def test_mean_se():
    assert mean_se([1.0, 1.0, 1.0]) == (1.0, 0.0)
    m, s = mean_se([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(1.0 / math.sqrt(3))
    assert math.isnan(mean_se([2.0])[1])


def test_artifacts_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(ARTIFACTS_ENV, str(tmp_path / "x"))
    assert default_root() == tmp_path / "x"
