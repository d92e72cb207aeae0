"""Desk-scale training of a one-hidden-layer classifier on shifted Gaussian blobs.

Multipliers for the MaxEnt losses are solved once from the training prior
before the first epoch and then held fixed, after which plain mini-batch
gradient descent runs with a cosine-annealed learning rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adhoc import smoothed_class_targets, label_smooth
from .losses import LossConfig, LossForm, build_constraints, loss_and_grad, precompute_multipliers
from .metrics import PredictionSet, all_metrics, ece
from .solver import DEFAULT_TOL, LabelSpace, LagrangeSolution, MomentConstraints, PriorDistribution

SPLITS = ("train", "val", "test")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    k_count: int

    def subset(self, name: str) -> SyntheticDataset:
        mask = self.split == name
        return SyntheticDataset(self.features[mask], self.labels[mask], self.split[mask], self.k_count)

    def with_features(self, features: np.ndarray) -> SyntheticDataset:
        return replace(self, features=features)

    @property
    def class_prior(self) -> PriorDistribution:
        """Empirical label frequencies of the training split."""
        labels = self.labels[self.split == "train"] if np.any(self.split == "train") else self.labels
        return PriorDistribution(np.bincount(labels, minlength=self.k_count) / labels.size)

    def __len__(self) -> int:
        return self.labels.size


def _class_counts(total: int, prior: np.ndarray) -> np.ndarray:
    raw = total * prior
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:remainder]] += 1
    return counts


def generate_blobs(k: int = 10, d_in: int = 20, n_per_class: int = 300, seed: int = 0,
                   prior: Sequence[float] | None = None, center_scale: float = 0.6,
                   split_fractions: tuple[float, float, float] = (0.5, 0.1, 0.4)) -> SyntheticDataset:
    """Isotropic unit-variance Gaussian clusters around random centres.

    ``prior`` reweights class sizes while keeping ``k * n_per_class`` samples in
    total; each class is split into train/val/test by ``split_fractions``.
    """
    if k < 2 or d_in < 1 or n_per_class < 10:
        raise ValueError("need k >= 2, d_in >= 1 and n_per_class >= 10")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9 or min(split_fractions) < 0:
        raise ValueError("split_fractions must be three non-negative numbers summing to 1")
    prior = np.full(k, 1.0 / k) if prior is None else PriorDistribution(np.asarray(prior, float)).probs
    if prior.size != k:
        raise ValueError("prior length must equal k")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(k, d_in))
    counts = _class_counts(k * n_per_class, prior)
    feats, labels, splits = [], [], []
    for c, n in enumerate(counts):
        feats.append(centers[c] + rng.normal(size=(n, d_in)))
        labels.append(np.full(n, c))
        n_train = int(round(split_fractions[0] * n))
        n_val = int(round(split_fractions[1] * n))
        tags = np.array(["test"] * n, dtype="<U5")
        tags[:n_train] = "train"
        tags[n_train:n_train + n_val] = "val"
        splits.append(tags)
    return SyntheticDataset(np.vstack(feats), np.concatenate(labels), np.concatenate(splits), k)


@dataclass(frozen=True)
class ShiftSpec:
    noise_scales: tuple[float, ...] = (0.0, 0.3, 0.6, 0.9, 1.2, 1.5)

    def __post_init__(self):
        scales = tuple(float(s) for s in self.noise_scales)
        if not scales or scales[0] != 0.0:
            raise ValueError("level 0 must have noise scale 0")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("noise scales must be strictly increasing")
        object.__setattr__(self, "noise_scales", scales)

    @property
    def levels(self) -> list[int]:
        return list(range(len(self.noise_scales)))


def apply_shift(ds: SyntheticDataset, spec: ShiftSpec, level: int, seed: int = 0) -> SyntheticDataset:
    """Add Gaussian noise scaled by ``noise_scales[level]`` times each feature's std."""
    if level not in spec.levels:
        raise ValueError(f"unknown shift level {level}; levels are {spec.levels}")
    if level == 0:
        return ds.with_features(ds.features.copy())
    rng = np.random.default_rng([seed, level])
    std = ds.features.std(axis=0)
    noise = rng.normal(size=ds.features.shape) * (spec.noise_scales[level] * std)
    return ds.with_features(ds.features + noise)


@dataclass
class MLPModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d_in: int, hidden: int, k: int, rng: np.random.Generator) -> MLPModel:
        w1 = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_in, hidden))
        w2 = rng.normal(0.0, math.sqrt(2.0 / hidden), size=(hidden, k))
        return cls(w1, np.zeros(hidden), w2, np.zeros(k))

    @property
    def layer_sizes(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate (hidden ReLU) activations."""
        return np.maximum(x @ self.w1 + self.b1, 0.0)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ self.w2 + self.b2

    def backward(self, x: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        h = self.features(x)
        dh = dlogits @ self.w2.T
        dh[h <= 0] = 0.0
        return {"w1": x.T @ dh, "b1": dh.sum(axis=0), "w2": h.T @ dlogits, "b2": dlogits.sum(axis=0)}

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> MLPModel:
        return MLPModel(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass(frozen=True)
class TrainConfig:
    loss: LossForm = LossForm.CE
    gamma: float = 1.0
    include_local: bool = True
    label_smoothing: float = 0.0
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.05
    hidden: int = 64
    seed: int = 0
    solver_tol: float = DEFAULT_TOL
    base: str = "ce_entropy"

    def __post_init__(self):
        object.__setattr__(self, "loss", LossForm(self.loss))
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.hidden < 1:
            raise ValueError("epochs, batch_size, learning_rate and hidden must be positive")
        if not self.solver_tol > 0:
            raise ValueError("solver tolerance must be positive")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    loss: float
    val_accuracy: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    multipliers: LagrangeSolution | None = None
    constraints: MomentConstraints | None = None

    def to_csv(self) -> str:
        rows = ["epoch,learning_rate,loss,val_accuracy"]
        rows += [f"{r.epoch},{r.learning_rate:.6f},{r.loss:.6f},{r.val_accuracy:.6f}" for r in self.epochs]
        return "\n".join(rows) + "\n"


def cosine_rate(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / max(epochs, 1)))


def make_targets(labels: np.ndarray, k: int, alpha: float = 0.0) -> np.ndarray:
    onehot = np.eye(k)[labels]
    return label_smooth(onehot, alpha, k) if alpha > 0 else onehot


def prepare_loss(prior: PriorDistribution, k: int, cfg: TrainConfig) -> tuple[LossConfig, MomentConstraints | None]:
    """Solve constraints and multipliers for ``cfg`` (the pre-training step)."""
    form = cfg.loss.constraint_form
    if form is None:
        return LossConfig(cfg.loss, cfg.gamma, label_smoothing_alpha=cfg.label_smoothing, base=cfg.base), None
    ls = LabelSpace(k)
    class_targets = smoothed_class_targets(k, cfg.label_smoothing) if cfg.label_smoothing > 0 else None
    constraints = build_constraints(prior, ls, cfg.include_local, class_targets)
    multipliers = precompute_multipliers(prior, ls, form, cfg.include_local, class_targets, cfg.solver_tol)
    return LossConfig(cfg.loss, cfg.gamma, multipliers, cfg.include_local, cfg.label_smoothing,
                      cfg.base), constraints


def train(ds: SyntheticDataset, cfg: TrainConfig) -> tuple[MLPModel, TrainingLog]:
    rng = np.random.default_rng(cfg.seed)
    tr, val = ds.subset("train"), ds.subset("val")
    k = ds.k_count
    loss_cfg, constraints = prepare_loss(ds.class_prior, k, cfg)
    log = TrainingLog(multipliers=loss_cfg.multipliers, constraints=constraints)

    targets = make_targets(tr.labels, k, cfg.label_smoothing)
    model = MLPModel.init(tr.features.shape[1], cfg.hidden, k, rng)
    n = len(tr)
    for epoch in range(cfg.epochs):
        lr = cosine_rate(cfg.learning_rate, epoch, cfg.epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = tr.features[idx]
            value, dlogits = loss_and_grad(model.logits(x), targets[idx], loss_cfg, constraints)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            total += value * idx.size
            for name, grad in model.backward(x, dlogits).items():
                model.params()[name] -= lr * grad
        val_acc = float(np.mean(model.logits(val.features).argmax(axis=1) == val.labels)) if len(val) else math.nan
        log.epochs.append(EpochRecord(epoch, lr, total / n, val_acc))
    return model, log


@dataclass(frozen=True)
class LevelResult:
    level: int
    metrics: dict[str, float]
    logits: np.ndarray
    labels: np.ndarray
    feature_norm: float


def evaluate_across_shifts(model: MLPModel, ds: SyntheticDataset, spec: ShiftSpec, bins: int = 15,
                           seed: int = 0, temperature: float = 1.0) -> list[LevelResult]:
    """Metrics on the test split at each shift level.

    ``temperature`` divides the logits before the softmax; the stored logits
    are always the raw network outputs.
    """
    test = ds.subset("test")
    results = []
    for level in spec.levels:
        shifted = apply_shift(test, spec, level, seed)
        logits = model.logits(shifted.features)
        ps = PredictionSet.from_logits(logits / temperature, shifted.labels)
        norm = float(np.linalg.norm(model.features(shifted.features), axis=1).mean())
        results.append(LevelResult(level, all_metrics(ps, bins), logits, shifted.labels, norm))
    return results


def feature_norm_study(model: MLPModel, ds: SyntheticDataset, spec: ShiftSpec, bins: int = 15,
                       seed: int = 0) -> list[tuple[int, float, float]]:
    """``(level, mean L2 norm of penultimate features, ECE)`` for each shift level."""
    test = ds.subset("test")
    rows = []
    for level in spec.levels:
        shifted = apply_shift(test, spec, level, seed)
        norm = float(np.linalg.norm(model.features(shifted.features), axis=1).mean())
        rows.append((level, norm, ece(PredictionSet.from_logits(model.logits(shifted.features), shifted.labels), bins)))
    return rows


def ablate_local_constraints(ds: SyntheticDataset, cfg: TrainConfig, spec: ShiftSpec, bins: int = 15,
                             variants: tuple[bool, bool] = (False, True)) -> dict[str, list[float]]:
    """Per-level ECE for twin runs that differ only in ``include_local``."""
    if cfg.loss.constraint_form is None:
        raise ValueError("the ablation needs a MaxEnt loss form")
    curves = {}
    for name, include_local in zip(("global_only", "global_local"), variants):
        model, _ = train(ds, replace(cfg, include_local=include_local))
        curves[name] = [r.metrics["ece"] for r in evaluate_across_shifts(model, ds, spec, bins, cfg.seed)]
    return curves
