"""Label smoothing before training and temperature scaling after it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .losses import softmax
from .metrics import PredictionSet, nll

DEFAULT_TEMPERATURE_GRID = (1.25, 1.50, 1.75, 2.00)


def label_smooth(one_hot: np.ndarray, alpha: float, k: int | None = None) -> np.ndarray:
    """``(1 - alpha) * y + alpha / K``; works on a single vector or a batch."""
    one_hot = np.asarray(one_hot, dtype=float)
    k = one_hot.shape[-1] if k is None else k
    if one_hot.shape[-1] != k:
        raise ValueError(f"target has {one_hot.shape[-1]} classes, expected {k}")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must be in [0, 1)")
    return (1.0 - alpha) * one_hot + alpha / k


def smoothed_class_targets(k: int, alpha: float) -> np.ndarray:
    """Row ``c`` is the smoothed target of class ``c``."""
    return label_smooth(np.eye(k), alpha, k)


def temperature_scale(logits: np.ndarray, t: float) -> np.ndarray:
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    return softmax(np.asarray(logits, dtype=float) / t)


@dataclass(frozen=True)
class TemperatureFit:
    grid: tuple[float, ...]
    nll_at_t: tuple[float, ...]
    chosen_t: float

    @property
    def nll_at_chosen(self) -> float:
        return self.nll_at_t[self.grid.index(self.chosen_t)]


def fit_temperature(logits: np.ndarray, labels: np.ndarray,
                    grid: Sequence[float] = DEFAULT_TEMPERATURE_GRID) -> TemperatureFit:
    """Pick the grid temperature with the lowest validation NLL (ties go to the smaller T)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    if logits.shape[0] == 0:
        raise ValueError("validation set is empty")
    grid = tuple(float(t) for t in grid)
    if not grid:
        raise ValueError("temperature grid is empty")
    if any(not t > 0 for t in grid):
        raise ValueError("temperature grid entries must be positive")
    scores = tuple(nll(PredictionSet(temperature_scale(logits, t), labels)) for t in grid)
    best = min(range(len(grid)), key=lambda i: (scores[i], grid[i]))
    return TemperatureFit(grid, scores, grid[best])


def parse_grid(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValueError(f"bad temperature grid {text!r}") from None
    if not grid:
        raise ValueError("temperature grid is empty")
    return grid
