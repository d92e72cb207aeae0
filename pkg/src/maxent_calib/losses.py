"""Cross-entropy, multi-class focal loss and the constrained MaxEnt losses.

All losses are functions of logits through the softmax.  Gradients with
respect to the logits are analytic: for any loss written as ``L(p)``, with
``a_k = dL/dp_k`` the logit gradient is ``p_j * (a_j - sum_k a_k p_k)``.
Batches are reduced by the mean over samples.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .solver import (
    DEFAULT_TOL,
    Form,
    LabelSpace,
    LagrangeSolution,
    MomentConstraints,
    PriorDistribution,
    SolverError,
    global_moments,
    solve_for_targets,
)

PROB_FLOOR = 1e-12
BASES = ("ce_entropy", "focal", "focal_all")


class LossForm(str, enum.Enum):
    CE = "ce"
    FOCAL = "focal"
    MAXENT_MEAN = "maxent_mean"
    MAXENT_VAR = "maxent_var"
    MAXENT_JOINT = "maxent_joint"

    @property
    def constraint_form(self) -> Form | None:
        return {LossForm.MAXENT_MEAN: Form.MEAN, LossForm.MAXENT_VAR: Form.VARIANCE,
                LossForm.MAXENT_JOINT: Form.JOINT}.get(self)


class MultiplierError(SolverError):
    def __init__(self, message: str, label: int | None):
        super().__init__(message)
        self.label = label


@dataclass(frozen=True)
class LossConfig:
    """Loss selection.

    ``base`` picks the term the constraint penalty is added to (ignored for CE):

    * ``"ce_entropy"``  ``-sum_k y_k log p_k - gamma * H(p)``
    * ``"focal"``       ``-sum_k y_k (1 - p_k)**gamma log p_k``
    * ``"focal_all"``   ``-sum_k (1 - p_k)**gamma log p_k`` over every class.  This
      sum ignores the label entirely, so it is only useful for analysis.
    """

    form: LossForm = LossForm.CE
    gamma: float = 1.0
    multipliers: LagrangeSolution | None = None
    include_local: bool = True
    label_smoothing_alpha: float = 0.0
    base: str = "ce_entropy"

    def __post_init__(self):
        object.__setattr__(self, "form", LossForm(self.form))
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.label_smoothing_alpha < 1.0:
            raise ValueError("label_smoothing_alpha must be in [0, 1)")
        if self.base not in BASES:
            raise ValueError(f"base must be one of {BASES}")
        is_maxent = self.form.constraint_form is not None
        if is_maxent and self.multipliers is None:
            raise ValueError(f"{self.form.value} needs solved multipliers")
        if not is_maxent and self.multipliers is not None:
            raise ValueError(f"{self.form.value} takes no multipliers")
        if is_maxent and self.multipliers.form is not self.form.constraint_form:
            raise ValueError("multiplier form does not match the loss form")


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _safe_log(p: np.ndarray) -> np.ndarray:
    # exact log for every positive probability; an underflowed zero is read as the floor
    return np.log(np.where(p == 0, PROB_FLOOR, p))


def cross_entropy(p: np.ndarray, target: np.ndarray) -> np.ndarray | float:
    out = -(np.asarray(target, dtype=float) * _safe_log(np.asarray(p, dtype=float))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def focal_multiclass(p: np.ndarray, gamma: float = 1.0, target: np.ndarray | None = None):
    """``-sum_k w_k (1 - p_k)**gamma log p_k`` with ``w = target`` or all ones.

    With ``target=None`` and ``gamma=1`` this equals ``-sum_k log p_k - H(p)``.
    """
    p = np.asarray(p, dtype=float)
    w = np.ones_like(p) if target is None else np.asarray(target, dtype=float)
    out = -(w * (1.0 - p) ** gamma * _safe_log(p)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _focal_ap(p: np.ndarray, w: np.ndarray, gamma: float) -> np.ndarray:
    """``p_k * dL/dp_k`` for the weighted focal term."""
    q = 1.0 - p
    above = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if gamma == 0:
            pow_term = np.zeros_like(p)
        else:
            pow_term = np.where(q > 0, gamma * q ** (gamma - 1.0) * p * _safe_log(p), 0.0)
    return w * (pow_term - np.where(above, q ** gamma, 0.0))


def _as_batch(logits, target):
    logits = np.asarray(logits, dtype=float)
    target = np.asarray(target, dtype=float)
    single = logits.ndim == 1
    logits, target = np.atleast_2d(logits), np.atleast_2d(target)
    if logits.shape != target.shape:
        raise ValueError(f"logits {logits.shape} and targets {target.shape} differ in shape")
    return logits, target, single


def _penalty(p: np.ndarray, target: np.ndarray, cfg: LossConfig, constraints: MomentConstraints):
    """Per-sample constraint penalty and its ``p * dL/dp`` contribution."""
    k = p.shape[1]
    if constraints.k_count != k:
        raise ValueError(f"constraints are for K={constraints.k_count}, logits have K={k}")
    sol = cfg.multipliers
    y = np.arange(k, dtype=float)
    labels = target.argmax(axis=1)
    if sol.per_class is not None:
        if len(sol.per_class) != k:
            raise ValueError("per-class multipliers do not match K")
        table = sol.per_class
    else:
        table = [sol] * k
    lam_mu = np.array([s.lambda_mu or 0.0 for s in table])[labels]
    lam_s2 = np.array([s.lambda_sigma2 or 0.0 for s in table])[labels]
    local = 1.0 if cfg.include_local else 0.0
    scale = 1.0 + local

    loss = np.zeros(len(p))
    ap = np.zeros_like(p)
    mu_l = target @ y
    form = cfg.form.constraint_form
    if form in (Form.MEAN, Form.JOINT):
        e_y = p @ y
        loss += lam_mu * ((e_y - constraints.mu_global) + local * (e_y - mu_l))
        ap += (lam_mu * scale)[:, None] * p * y
    if form is Form.VARIANCE:
        f = np.broadcast_to(y ** 2, p.shape)
        g_target, l_target = constraints.second_moment_global, target @ (y ** 2)
    elif form is Form.JOINT:
        centers = np.array([s.center for s in table])[labels]
        f = (y[None, :] - centers[:, None]) ** 2
        g_target = constraints.sigma2_global
        l_target = (target * (y[None, :] - mu_l[:, None]) ** 2).sum(axis=1)
    if form in (Form.VARIANCE, Form.JOINT):
        e_f = (p * f).sum(axis=1)
        loss += lam_s2 * ((e_f - g_target) + local * (e_f - l_target))
        ap += (lam_s2 * scale)[:, None] * p * f
    return loss, ap


def loss_and_grad(logits: np.ndarray, target: np.ndarray, cfg: LossConfig,
                  constraints: MomentConstraints | None = None) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to the logits."""
    logits, target, single = _as_batch(logits, target)
    p = softmax(logits)
    if cfg.form is LossForm.CE or cfg.base == "ce_entropy":
        per_sample = cross_entropy(p, target)
        ap = -target * (p > 0)
        if cfg.form is not LossForm.CE and cfg.gamma:
            per_sample = per_sample - cfg.gamma * entropy(p)
            with np.errstate(divide="ignore", invalid="ignore"):
                ap = ap + cfg.gamma * np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) + 1.0), 0.0)
    else:
        w = np.ones_like(p) if cfg.base == "focal_all" else target
        per_sample = focal_multiclass(p, cfg.gamma, w)
        ap = _focal_ap(p, w, cfg.gamma)
    if cfg.form.constraint_form is not None:
        if constraints is None:
            raise ValueError("MaxEnt losses need moment constraints")
        pen, pen_ap = _penalty(p, target, cfg, constraints)
        per_sample = per_sample + pen
        ap = ap + pen_ap
    n = len(p)
    grad = (ap - p * ap.sum(axis=1, keepdims=True)) / n
    return float(np.mean(per_sample)), (grad[0] if single else grad)


def maxent_loss(logits, target, cfg: LossConfig, constraints: MomentConstraints | None = None) -> float:
    return loss_and_grad(logits, target, cfg, constraints)[0]


def maxent_loss_grad(logits, target, cfg: LossConfig,
                     constraints: MomentConstraints | None = None) -> np.ndarray:
    return loss_and_grad(logits, target, cfg, constraints)[1]


def build_constraints(prior: PriorDistribution, ls: LabelSpace, include_local: bool = True,
                      class_targets: np.ndarray | None = None) -> MomentConstraints:
    """Global moments of ``prior``; local moments from ``class_targets`` (row k = class k's target)."""
    constraints = global_moments(prior, ls)
    if class_targets is not None:
        constraints = constraints.with_local_targets(class_targets)
    if not include_local:
        constraints = MomentConstraints(
            constraints.mu_global, constraints.sigma2_global, constraints.second_moment_global,
            constraints.mu_local, constraints.sigma2_local, constraints.second_moment_local,
            include_local=False)
    return constraints


def precompute_multipliers(prior: PriorDistribution, ls: LabelSpace, form: Form | str,
                           include_local: bool = True, class_targets: np.ndarray | None = None,
                           tol: float = DEFAULT_TOL) -> LagrangeSolution:
    """Solve the multipliers once, before training.

    With local constraints there is one solve per ground-truth class, using the
    blended targets ``(global + local_k) / 2``; otherwise a single solve on the
    global moments.
    """
    form = Form(form)
    constraints = build_constraints(prior, ls, include_local, class_targets)
    if not include_local:
        try:
            return solve_for_targets(form, constraints.targets(form), ls, tol)
        except SolverError as exc:
            raise MultiplierError(f"global {form.value} solve failed: {exc}", None) from exc
    per_class = []
    for label in range(ls.k_count):
        try:
            per_class.append(solve_for_targets(form, constraints.targets(form, label), ls, tol))
        except SolverError as exc:
            raise MultiplierError(f"class {label}: {form.value} solve failed: {exc}", label) from exc
    return LagrangeSolution(form, None, None, max(s.iterations for s in per_class),
                            max(s.residual for s in per_class), per_class=tuple(per_class))
