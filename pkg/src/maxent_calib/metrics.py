"""Calibration metrics over a set of predictions.

Binned metrics use equal-width bins over ``(0, 1]``, left-open and
right-closed, with a confidence of exactly 0 placed in the first bin.  Bin
gaps and cumulative sums are accumulated as exact rationals and rounded once
at the end, so every metric is correctly rounded and independent of record
order down to the last bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import accumulate
from pathlib import Path

import numpy as np

from .losses import PROB_FLOOR, softmax

TABLE_BINS = 15
DIAGRAM_BINS = 10


class PredictionFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        labels = np.asarray(self.labels).astype(int).reshape(-1)
        if probs.shape[0] != labels.size:
            raise ValueError("probs and labels disagree on the number of records")
        if probs.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
            raise ValueError("label outside [0, K-1]")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels: np.ndarray) -> PredictionSet:
        return cls(softmax(logits), labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def k_count(self) -> int:
        return self.probs.shape[1]

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    def subset(self, mask: np.ndarray) -> PredictionSet:
        return PredictionSet(self.probs[mask], self.labels[mask])


def _require(ps: PredictionSet) -> None:
    if len(ps) == 0:
        raise ValueError("prediction set is empty")


def bin_edges(n_bins: int) -> np.ndarray:
    if n_bins < 1:
        raise ValueError("need at least one bin")
    return np.linspace(0.0, 1.0, n_bins + 1)


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin of each confidence under the ``(lo, hi]`` convention."""
    idx = np.searchsorted(bin_edges(n_bins), conf, side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


@dataclass(frozen=True)
class BinStatistics:
    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray
    correct_sum: np.ndarray
    conf_sum: np.ndarray
    total: int
    # exact hits_b - sum(conf_b) per bin
    gaps: tuple[Fraction, ...] = field(default=(), repr=False, compare=False)

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.correct_sum / np.maximum(self.counts, 1), np.nan)

    @property
    def confidence(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.conf_sum / np.maximum(self.counts, 1), np.nan)

    def ece(self) -> float:
        """Weighted gap ``sum_b n_b/N |acc_b - conf_b|``, i.e. ``sum_b |hits_b - conf_sum_b| / N``."""
        return float(sum(abs(g) for g in self.gaps) / self.total)

    def mce(self) -> float:
        return float(max(abs(g) / n for g, n in zip(self.gaps, self.counts) if n > 0))


def _bin_stats(conf: np.ndarray, hits: np.ndarray, groups: list[np.ndarray],
               lower: np.ndarray, upper: np.ndarray) -> BinStatistics:
    counts = np.array([g.size for g in groups])
    correct = np.array([float(hits[g].sum()) for g in groups])
    exact = [sum(map(Fraction, conf[g].tolist()), Fraction(0)) for g in groups]
    gaps = tuple(Fraction(int(c)) - s for c, s in zip(correct, exact))
    return BinStatistics(lower, upper, counts, correct, np.array([float(s) for s in exact]),
                         int(conf.size), gaps)


def _width_bins(conf: np.ndarray, hits: np.ndarray, n_bins: int) -> BinStatistics:
    edges = bin_edges(n_bins)
    idx = bin_index(conf, n_bins)
    groups = [np.flatnonzero(idx == b) for b in range(n_bins)]
    return _bin_stats(conf, hits, groups, edges[:-1], edges[1:])


def reliability_bins(ps: PredictionSet, bins: int = DIAGRAM_BINS) -> BinStatistics:
    _require(ps)
    return _width_bins(ps.confidences, ps.correct, bins)


def ece(ps: PredictionSet, bins: int = TABLE_BINS) -> float:
    return reliability_bins(ps, bins).ece()


def mce(ps: PredictionSet, bins: int = TABLE_BINS) -> float:
    return reliability_bins(ps, bins).mce()


def cece(ps: PredictionSet, bins: int = TABLE_BINS) -> float:
    """Classwise ECE: one-vs-rest binning of each class probability, averaged over classes."""
    _require(ps)
    total = Fraction(0)
    for k in range(ps.k_count):
        total += sum(abs(g) for g in _width_bins(ps.probs[:, k], ps.labels == k, bins).gaps)
    return float(total / (len(ps) * ps.k_count))


def ada_ece(ps: PredictionSet, bins: int = TABLE_BINS) -> float:
    """ECE over equal-mass bins; the first ``N mod B`` bins hold one extra record."""
    _require(ps)
    if bins > len(ps):
        raise ValueError(f"{bins} bins for {len(ps)} records")
    conf = ps.confidences
    # ties ordered by correctness so equal records are interchangeable
    order = np.lexsort((ps.correct, conf))
    groups = np.array_split(order, bins)
    lower = np.array([conf[g].min() for g in groups])
    upper = np.array([conf[g].max() for g in groups])
    return _bin_stats(conf, ps.correct, groups, lower, upper).ece()


def kse(ps: PredictionSet, variant: str = "max") -> float:
    """Binning-free calibration error from cumulative sums sorted by confidence.

    ``max`` returns ``max_i |sum_{j<=i} (correct_j - conf_j)| / N``; ``mean``
    averages the same absolute gap over the prefixes.  Prefixes that split a
    run of equal confidences are skipped, so the value does not depend on how
    ties are ordered.
    """
    _require(ps)
    if variant not in ("max", "mean"):
        raise ValueError(f"unknown KSE variant {variant!r}")
    conf = ps.confidences
    order = np.argsort(conf, kind="stable")
    sorted_conf = conf[order]
    diffs = [Fraction(int(h)) - Fraction(c) for h, c in zip(ps.correct[order], sorted_conf.tolist())]
    run_end = np.append(sorted_conf[1:] != sorted_conf[:-1], True)
    gaps = [abs(g) for g, end in zip(accumulate(diffs), run_end) if end]
    if variant == "max":
        return float(max(gaps) / len(ps))
    return float(sum(gaps) / (len(gaps) * len(ps)))


def nll(ps: PredictionSet) -> float:
    _require(ps)
    p_true = ps.probs[np.arange(len(ps)), ps.labels]
    return -math.fsum(np.log(np.maximum(p_true, PROB_FLOOR)).tolist()) / len(ps)


def brier(ps: PredictionSet) -> float:
    _require(ps)
    onehot = np.eye(ps.k_count)[ps.labels]
    return math.fsum(((onehot - ps.probs) ** 2).ravel().tolist()) / len(ps)


def error_rate(ps: PredictionSet) -> float:
    _require(ps)
    return 1.0 - int(ps.correct.sum()) / len(ps)


def bin_strength(ps: PredictionSet, bins: int = DIAGRAM_BINS) -> np.ndarray:
    """Fraction of records whose top-1 confidence falls in each bin."""
    _require(ps)
    return np.bincount(bin_index(ps.confidences, bins), minlength=bins) / len(ps)


def misclassified_subset(ps: PredictionSet) -> PredictionSet:
    return ps.subset(~ps.correct)


METRIC_NAMES = ("error", "ece", "cece", "kse", "mce", "ada_ece", "nll", "brier")


def all_metrics(ps: PredictionSet, bins: int = TABLE_BINS, kse_variant: str = "max") -> dict[str, float]:
    return {
        "error": error_rate(ps),
        "ece": ece(ps, bins),
        "cece": cece(ps, bins),
        "kse": kse(ps, kse_variant),
        "mce": mce(ps, bins),
        "ada_ece": ada_ece(ps, min(bins, len(ps))),
        "nll": nll(ps),
        "brier": brier(ps),
    }


def format_metrics(values: dict[str, float]) -> str:
    return "".join(f"{name}={value:.6f}\n" for name, value in values.items())


def read_records(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(values, labels)`` of a prediction file: header ``label,v0,...,v{K-1}`` then one record per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PredictionFileError("file is empty", 1)
    header = lines[0].strip().split(",")
    k = len(header) - 1
    if k < 2 or header != ["label"] + [f"v{i}" for i in range(k)]:
        raise PredictionFileError(f"bad header {lines[0].strip()!r}; expected label,v0,...,v{{K-1}}", 1)
    labels, values = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.strip().split(",")
        if len(fields) != k + 1:
            raise PredictionFileError(f"expected {k + 1} fields, found {len(fields)}", lineno)
        try:
            label = int(fields[0])
        except ValueError:
            raise PredictionFileError(f"label {fields[0]!r} is not an integer", lineno) from None
        if not 0 <= label < k:
            raise PredictionFileError(f"label {label} outside [0, {k - 1}]", lineno)
        try:
            row = [float(v) for v in fields[1:]]
        except ValueError:
            raise PredictionFileError("non-numeric value", lineno) from None
        if not all(math.isfinite(v) for v in row):
            raise PredictionFileError("non-finite value", lineno)
        labels.append(label)
        values.append(row)
    if not labels:
        raise PredictionFileError("no records")
    return np.array(values), np.array(labels)


def read_predictions(path: str | Path, logits: bool = False) -> PredictionSet:
    """Load a prediction file; with ``logits`` the rows are passed through the softmax."""
    arr, labels = read_records(path)
    if logits:
        return PredictionSet.from_logits(arr, labels)
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-6):
        bad = int(np.flatnonzero((arr < 0).any(axis=1) | (np.abs(arr.sum(axis=1) - 1.0) > 1e-6))[0])
        raise PredictionFileError("probabilities must be non-negative and sum to 1", bad + 2)
    return PredictionSet(arr, labels)


def write_predictions(path: str | Path, values: np.ndarray, labels: np.ndarray) -> None:
    """Write logits or probabilities with round-trip float precision."""
    values = np.atleast_2d(values)
    k = values.shape[1]
    rows = ["label," + ",".join(f"v{i}" for i in range(k))]
    rows += [f"{int(lab)}," + ",".join(repr(float(v)) for v in row) for lab, row in zip(labels, values)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
