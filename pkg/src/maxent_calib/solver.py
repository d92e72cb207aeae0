"""Moment constraints and Lagrange multipliers for maximum-entropy label distributions.

The constrained maximum-entropy problem over class indices ``y = 0..K-1`` has
the Gibbs solution ``p_k = exp(-1 - sum_n lambda_n f_n(y_k))``.  Three constraint
families are supported:

* ``mean``      f = y
* ``variance``  f = y**2 (raw second moment; centred ``(y - c)**2`` in normalized mode)
* ``joint``     f = (y, (y - c)**2) with ``c`` the constrained mean

Multipliers are found with Newton's method using the analytic derivative of the
constraint function.  The unnormalized path (no partition function) is what the
loss multipliers use; :func:`solve_normalized` adds the sum-to-one constraint and
produces proper probability mass functions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_TOL = 1e-15
DEFAULT_MAX_ITER = 200
_MAX_HALVINGS = 60
_COND_LIMIT = 1e12
_PERTURBATION = 1e-6
_EPS = np.finfo(float).eps


class SolverError(RuntimeError):
    """Base class for multiplier solver failures."""


class ConvergenceError(SolverError):
    pass


class InfeasibleTargetError(SolverError, ValueError):
    pass


class SingularJacobianError(SolverError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class PriorFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class Form(str, enum.Enum):
    MEAN = "mean"
    VARIANCE = "variance"
    JOINT = "joint"


@dataclass(frozen=True)
class LabelSpace:
    """The fixed vector of class indices ``[0, 1, ..., K-1]``."""

    k_count: int

    def __post_init__(self):
        if int(self.k_count) != self.k_count or self.k_count < 2:
            raise ValueError(f"k_count must be an integer >= 2, got {self.k_count}")

    @property
    def classes(self) -> np.ndarray:
        return np.arange(self.k_count, dtype=float)


@dataclass(frozen=True)
class PriorDistribution:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 2:
            raise ValueError("prior must be a vector with at least two entries")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("prior entries must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"prior must sum to 1 within 1e-9, sums to {probs.sum():.12g}")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_values(cls, values: Sequence[float], counts: bool = False,
                    renormalize_tol: float = 1e-3) -> PriorDistribution:
        """Build a prior from raw values.

        Counts are always normalized.  Probabilities are renormalized only when
        their sum is within ``renormalize_tol`` of one (printed priors are
        rounded); anything further off is rejected.
        """
        arr = np.asarray(values, dtype=float)
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("prior entries must be finite and non-negative")
        total = arr.sum()
        if total <= 0:
            raise ValueError("prior entries sum to zero")
        if not counts and abs(total - 1.0) > renormalize_tol:
            raise ValueError(f"probabilities sum to {total:.6g}; pass counts=True for raw counts")
        return cls(arr / total)

    @classmethod
    def uniform(cls, k: int) -> PriorDistribution:
        return cls(np.full(k, 1.0 / k))

    @property
    def k_count(self) -> int:
        return self.probs.size


def read_prior(path: str | Path, counts: bool = False) -> PriorDistribution:
    """Read a prior file: one value per line, blank lines and ``#`` comments ignored."""
    values = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            value = float(line)
        except ValueError:
            raise PriorFileError(f"not a number: {raw.strip()!r}", lineno) from None
        if not math.isfinite(value) or value < 0:
            raise PriorFileError(f"value must be finite and non-negative: {raw.strip()!r}", lineno)
        values.append(value)
    if len(values) < 2:
        raise PriorFileError("need at least two class entries")
    try:
        return PriorDistribution.from_values(values, counts=counts)
    except ValueError as exc:
        raise PriorFileError(str(exc)) from None


class LocalMoments(NamedTuple):
    mean: float
    variance: float  # central, about ``mean``
    second_moment: float  # raw E[y^2]


def local_moments(target: np.ndarray, ls: LabelSpace) -> LocalMoments:
    """Moments of a single target vector (one-hot or smoothed label)."""
    target = np.asarray(target, dtype=float)
    if target.shape != (ls.k_count,):
        raise ValueError(f"target has shape {target.shape}, expected ({ls.k_count},)")
    if np.any(target < 0) or abs(target.sum() - 1.0) > 1e-9:
        raise ValueError("target must be a non-negative vector summing to 1")
    y = ls.classes
    mean = float(y @ target)
    return LocalMoments(mean, float(((y - mean) ** 2) @ target), float((y ** 2) @ target))


@dataclass(frozen=True)
class MomentConstraints:
    """Global moments of the class prior plus per-class local moments.

    ``sigma2_local`` holds central variances and ``second_moment_local`` raw
    second moments of each class's target vector; for one-hot targets these are
    ``0`` and ``k**2``.
    """

    mu_global: float
    sigma2_global: float
    second_moment_global: float
    mu_local: np.ndarray
    sigma2_local: np.ndarray
    second_moment_local: np.ndarray
    include_local: bool = True

    @property
    def k_count(self) -> int:
        return len(self.mu_local)

    def with_local_targets(self, class_targets: np.ndarray) -> MomentConstraints:
        """Recompute local moments from one target vector per class (row k for class k)."""
        class_targets = np.asarray(class_targets, dtype=float)
        ls = LabelSpace(self.k_count)
        if class_targets.shape != (ls.k_count, ls.k_count):
            raise ValueError("need one target vector per class")
        moments = [local_moments(row, ls) for row in class_targets]
        return MomentConstraints(
            self.mu_global, self.sigma2_global, self.second_moment_global,
            np.array([m.mean for m in moments]),
            np.array([m.variance for m in moments]),
            np.array([m.second_moment for m in moments]),
            self.include_local,
        )

    def targets(self, form: Form | str, label: int | None = None) -> tuple[float, ...]:
        """Constraint targets for ``form``; blends global and local halves when a label is given."""
        form = Form(form)
        blend = self.include_local and label is not None
        if blend:
            mu = 0.5 * (self.mu_global + self.mu_local[label])
        else:
            mu = self.mu_global
        if form is Form.MEAN:
            return (float(mu),)
        if form is Form.VARIANCE:
            m2 = self.second_moment_global
            if blend:
                m2 = 0.5 * (m2 + self.second_moment_local[label])
            return (float(m2),)
        var = self.sigma2_global
        if blend:
            var = 0.5 * (var + self.sigma2_local[label])
        return float(mu), float(var)


def global_moments(prior: PriorDistribution, ls: LabelSpace) -> MomentConstraints:
    if prior.k_count != ls.k_count:
        raise ValueError(f"prior has {prior.k_count} entries but the label space has {ls.k_count}")
    y = ls.classes
    mu = float(y @ prior.probs)
    m2 = float((y ** 2) @ prior.probs)
    return MomentConstraints(
        mu_global=mu,
        sigma2_global=max(m2 - mu * mu, 0.0),
        second_moment_global=m2,
        mu_local=y.copy(),
        sigma2_local=np.zeros(ls.k_count),
        second_moment_local=y ** 2,
    )


@dataclass(frozen=True)
class LagrangeSolution:
    form: Form
    lambda_mu: float | None
    lambda_sigma2: float | None
    iterations: int
    residual: float
    center: float | None = None
    normalized: bool = False
    targets: tuple[float, ...] = ()
    per_class: tuple[LagrangeSolution, ...] | None = None

    def __post_init__(self):
        if self.per_class is None:
            has_mu, has_s2 = self.lambda_mu is not None, self.lambda_sigma2 is not None
            expected = {Form.MEAN: (True, False), Form.VARIANCE: (False, True), Form.JOINT: (True, True)}
            if (has_mu, has_s2) != expected[self.form]:
                raise ValueError(f"{self.form.value} solution has the wrong multipliers")

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([v for v in (self.lambda_mu, self.lambda_sigma2) if v is not None])

    def for_label(self, label: int) -> LagrangeSolution:
        return self.per_class[label] if self.per_class is not None else self

    def report_lines(self) -> list[str]:
        lines = [f"form={self.form.value}", f"normalized={str(self.normalized).lower()}"]
        rows = [(None, self)] if self.per_class is None else list(enumerate(self.per_class))
        for label, sol in rows:
            prefix = "" if label is None else f"class{label}."
            for tname, t in zip(_target_names(sol.form), sol.targets):
                lines.append(f"{prefix}{tname}={t:.6f}")
            for name, value in (("lambda_mu", sol.lambda_mu), ("lambda_sigma2", sol.lambda_sigma2),
                                ("center", sol.center)):
                if value is not None:
                    lines.append(f"{prefix}{name}={value:.6f}")
            lines.append(f"{prefix}iterations={sol.iterations}")
            lines.append(f"{prefix}residual={sol.residual:.3e}")
        return lines


def _target_names(form: Form) -> tuple[str, ...]:
    return {Form.MEAN: ("target_mu",), Form.VARIANCE: ("target_m2",),
            Form.JOINT: ("target_mu", "target_var")}[form]


@dataclass(frozen=True)
class GibbsDistribution:
    weights: np.ndarray
    normalized: bool
    solution: LagrangeSolution | None = field(default=None, compare=False)

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("Gibbs weights must be positive")

    def mean(self, ls: LabelSpace) -> float:
        return float(ls.classes @ self.weights)

    def variance(self, ls: LabelSpace) -> float:
        mu = self.mean(ls)
        return float(((ls.classes - mu) ** 2) @ self.weights)


def _features(form: Form, ls: LabelSpace, center: float | None) -> np.ndarray:
    y = ls.classes
    if form is Form.MEAN:
        return y[:, None]
    if form is Form.VARIANCE:
        return (y ** 2 if center is None else (y - center) ** 2)[:, None]
    if center is None:
        raise ValueError("joint form needs a centre")
    return np.column_stack([y, (y - center) ** 2])


def _evaluate(feats: np.ndarray, lam: np.ndarray, target: np.ndarray, normalized: bool):
    """Constraint residual g, its analytic Jacobian, and the per-constraint magnitude."""
    with np.errstate(over="ignore", invalid="ignore"):
        expo = -feats @ lam
        if normalized:
            w = np.exp(expo - expo.max())
            w /= w.sum()
        else:
            w = np.exp(-1.0 + expo)
        moments = feats.T @ w
        g = moments - target
        if normalized:
            centred = feats - moments
            jac = -(centred * w[:, None]).T @ centred
        else:
            jac = -(feats * w[:, None]).T @ feats
        scale = np.maximum(np.abs(feats).T @ w, np.abs(target))
    return g, jac, scale


def _newton(feats: np.ndarray, target: Sequence[float], tol: float, max_iter: int,
            normalized: bool) -> tuple[np.ndarray, int, float]:
    target = np.asarray(target, dtype=float)
    lam = np.zeros(feats.shape[1])
    g, jac, scale = _evaluate(feats, lam, target, normalized)
    perturbed = False
    for iteration in range(max_iter + 1):
        floor = np.maximum(tol, 64 * _EPS * scale)
        if np.all(np.abs(g) <= floor):
            return lam, iteration, float(np.max(np.abs(g)))
        if iteration == max_iter:
            break
        cond = np.linalg.cond(jac) if np.all(np.isfinite(jac)) else np.inf
        if not cond < _COND_LIMIT:
            if perturbed:
                raise SingularJacobianError(
                    f"singular Jacobian at lambda={lam.tolist()} (condition number {cond:.3g})", cond)
            perturbed = True
            lam = lam + _PERTURBATION
            g, jac, scale = _evaluate(feats, lam, target, normalized)
            continue
        step = np.linalg.solve(jac, g)
        norm0 = np.linalg.norm(g)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = lam - t * step
            gc, jc, sc = _evaluate(feats, cand, target, normalized)
            if np.all(np.isfinite(gc)) and np.all(np.isfinite(jc)) and np.linalg.norm(gc) < norm0:
                break
            t *= 0.5
        else:
            # no decrease possible: only acceptable at the rounding floor
            if np.all(np.abs(g) <= 1e3 * _EPS * scale):
                return lam, iteration, float(np.max(np.abs(g)))
            raise ConvergenceError(f"line search stalled at lambda={lam.tolist()}, |g|={norm0:.3e}")
        lam, g, jac, scale = cand, gc, jc, sc
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (lambda={lam.tolist()}, |g|={np.max(np.abs(g)):.3e})")


def _check_cone(feats: np.ndarray, target: np.ndarray) -> None:
    """Unnormalized moments sweep the open cone spanned by the feature vectors."""
    if not np.all(np.isfinite(target)) or np.any(target < 0) or not np.any(target > 0):
        raise InfeasibleTargetError(f"targets {target.tolist()} are not positive")
    if feats.shape[1] == 1:
        if target[0] <= 0:
            raise InfeasibleTargetError(f"target {target[0]} must be positive")
        return
    nonzero = np.any(feats > 0, axis=1)
    angles = np.arctan2(feats[nonzero, 1], feats[nonzero, 0])
    angle = math.atan2(target[1], target[0])
    if not angles.min() < angle < angles.max():
        raise InfeasibleTargetError(
            f"targets {target.tolist()} lie outside the reachable cone of unnormalized moments")


def _solve_unnormalized(form: Form, targets: Sequence[float], ls: LabelSpace, tol: float,
                        max_iter: int, center: float | None = None) -> LagrangeSolution:
    if tol <= 0:
        raise ValueError("tol must be positive")
    feats = _features(form, ls, center)
    target = np.asarray(targets, dtype=float)
    _check_cone(feats, target)
    lam, iterations, residual = _newton(feats, target, tol, max_iter, normalized=False)
    lam_mu = float(lam[0]) if form is not Form.VARIANCE else None
    lam_s2 = float(lam[-1]) if form is not Form.MEAN else None
    return LagrangeSolution(form, lam_mu, lam_s2, iterations, residual,
                            center=center, targets=tuple(float(t) for t in target))


def solve_mean(mu_target: float, ls: LabelSpace, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> LagrangeSolution:
    """Solve ``sum_k exp(-1 - lam*y_k) * y_k = mu_target`` for ``lam``.

    The left side is strictly decreasing in ``lam`` and spans ``(0, inf)``, so
    any positive target has exactly one root.
    """
    return _solve_unnormalized(Form.MEAN, [mu_target], ls, tol, max_iter)


def solve_variance(m2_target: float, ls: LabelSpace, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> LagrangeSolution:
    """Solve ``sum_k exp(-1 - lam*y_k**2) * y_k**2 = m2_target``."""
    return _solve_unnormalized(Form.VARIANCE, [m2_target], ls, tol, max_iter)


def solve_joint(mu_target: float, var_target: float, ls: LabelSpace, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> LagrangeSolution:
    """Solve the coupled mean and central-variance equations for ``(lam1, lam2)``.

    Weights are ``exp(-1 - lam1*y - lam2*(y - mu_target)**2)``; the Newton step
    uses the exact 2x2 Jacobian, which is negative definite whenever the two
    features are linearly independent.
    """
    return _solve_unnormalized(Form.JOINT, [mu_target, var_target], ls, tol, max_iter,
                               center=float(mu_target))


def solve_for_targets(form: Form | str, targets: Sequence[float], ls: LabelSpace,
                      tol: float = DEFAULT_TOL) -> LagrangeSolution:
    form = Form(form)
    if form is Form.MEAN:
        return solve_mean(targets[0], ls, tol)
    if form is Form.VARIANCE:
        return solve_variance(targets[0], ls, tol)
    return solve_joint(targets[0], targets[1], ls, tol)


def gibbs_pmf(solution: LagrangeSolution, ls: LabelSpace, normalize: bool = True) -> GibbsDistribution:
    if solution.per_class is not None:
        raise ValueError("select a per-class solution with for_label() first")
    feats = _features(solution.form, ls, solution.center)
    expo = -1.0 - feats @ solution.lambdas
    if normalize or solution.normalized:
        w = np.exp(expo - expo.max())
        return GibbsDistribution(w / w.sum(), True, solution)
    return GibbsDistribution(np.exp(expo), False, solution)


def _check_hull(feats: np.ndarray, target: np.ndarray) -> None:
    """Normalized moments must lie strictly inside the convex hull of the feature points."""
    if feats.shape[1] == 1:
        lo, hi = feats[:, 0].min(), feats[:, 0].max()
        if not lo < target[0] < hi:
            raise InfeasibleTargetError(f"target {target[0]} must lie strictly in ({lo}, {hi})")
        return
    y, c = feats[:, 0], feats[:, 1]
    # second feature is convex in the first: the lower hull is the polyline, the upper a chord
    m, v = target
    if not y.min() < m < y.max():
        raise InfeasibleTargetError(f"mean target {m} must lie strictly in ({y.min()}, {y.max()})")
    lower = np.interp(m, y, c)
    upper = c[0] + (c[-1] - c[0]) * (m - y[0]) / (y[-1] - y[0])
    if not lower < v < upper:
        raise InfeasibleTargetError(
            f"variance target {v} must lie strictly in ({lower:.6g}, {upper:.6g}) for mean {m}")


def solve_normalized(constraints: MomentConstraints | None, form: Form | str | None, ls: LabelSpace,
                     tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> GibbsDistribution:
    """Entropy-maximizing pmf on ``0..K-1`` matching the global moments of ``constraints``.

    Unlike the unnormalized solvers this includes the sum-to-one constraint, so
    the result is a proper distribution.  The variance family is centred on
    ``constraints.mu_global``.  ``form=None`` means no moment constraint and
    returns the uniform distribution.
    """
    if form is None or constraints is None:
        return GibbsDistribution(np.full(ls.k_count, 1.0 / ls.k_count), True)
    form = Form(form)
    if form is Form.MEAN:
        center, target = None, [constraints.mu_global]
    elif form is Form.VARIANCE:
        center, target = constraints.mu_global, [constraints.sigma2_global]
    else:
        center, target = constraints.mu_global, [constraints.mu_global, constraints.sigma2_global]
    feats = _features(form, ls, center)
    target = np.asarray(target, dtype=float)
    _check_hull(feats, target)
    lam, iterations, residual = _newton(feats, target, tol, max_iter, normalized=True)
    solution = LagrangeSolution(
        form,
        float(lam[0]) if form is not Form.VARIANCE else None,
        float(lam[-1]) if form is not Form.MEAN else None,
        iterations, residual, center=center, normalized=True,
        targets=tuple(float(t) for t in target))
    return gibbs_pmf(solution, ls, normalize=True)


def moment_targets(mu: float, sigma2: float, ls: LabelSpace) -> MomentConstraints:
    """Global-only constraints from explicit mean and central variance values."""
    return MomentConstraints(
        mu_global=float(mu), sigma2_global=float(sigma2), second_moment_global=float(sigma2 + mu * mu),
        mu_local=ls.classes.copy(), sigma2_local=np.zeros(ls.k_count),
        second_moment_local=ls.classes ** 2, include_local=False)


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    value: float
    target: float
    residual: float
    satisfied: bool


def verify_constraints(solution: LagrangeSolution, constraints: MomentConstraints, ls: LabelSpace,
                       label: int | None = None, atol: float = 1e-9) -> list[ConstraintCheck]:
    """Substitute multipliers back into the general solution and compare with the targets.

    ``satisfied`` reports the one-sided form ``value <= target`` (up to ``atol``).
    """
    if solution.per_class is not None:
        if label is None:
            raise ValueError("per-class solutions need a label")
        solution = solution.for_label(label)
    targets = constraints.targets(solution.form, label)
    feats = _features(solution.form, ls, solution.center)
    weights = gibbs_pmf(solution, ls, normalize=solution.normalized).weights
    values = feats.T @ weights
    names = {Form.MEAN: ("mean",), Form.VARIANCE: ("second_moment",),
             Form.JOINT: ("mean", "central_variance")}[solution.form]
    return [ConstraintCheck(n, float(v), float(t), float(v - t), bool(v - t <= atol))
            for n, v, t in zip(names, values, targets)]
