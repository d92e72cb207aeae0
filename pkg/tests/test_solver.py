import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from maxent_calib.solver import (
    ConvergenceError,
    Form,
    InfeasibleTargetError,
    LabelSpace,
    LagrangeSolution,
    PriorDistribution,
    PriorFileError,
    SingularJacobianError,
    _newton,
    gibbs_pmf,
    global_moments,
    local_moments,
    moment_targets,
    read_prior,
    solve_joint,
    solve_mean,
    solve_normalized,
    solve_variance,
    verify_constraints,
)
from maxent_calib.losses import precompute_multipliers

from conftest import CIFAR10_PRIOR
from oracles import bisect, bracket_root, joint_grid_root, joint_residual, unnormalized_moment

LS10 = LabelSpace(10)


# --- domain types -----------------------------------------------------------

def test_label_space_needs_two_classes():
    with pytest.raises(ValueError):
        LabelSpace(1)
    assert LabelSpace(3).classes.tolist() == [0.0, 1.0, 2.0]


def test_prior_must_sum_to_one():
    with pytest.raises(ValueError):
        PriorDistribution(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        PriorDistribution(np.array([-0.5, 1.5]))


def test_prior_from_counts_and_rounded_probabilities():
    p = PriorDistribution.from_values([10, 30], counts=True)
    assert p.probs.tolist() == [0.25, 0.75]
    p = PriorDistribution.from_values(CIFAR10_PRIOR)
    assert abs(p.probs.sum() - 1.0) < 1e-12
    with pytest.raises(ValueError):
        PriorDistribution.from_values([0.5, 0.4])


def test_read_prior_skips_comments(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("# header\n0.25\n\n0.75  # second\n")
    assert read_prior(path).probs.tolist() == [0.25, 0.75]


def test_read_prior_names_bad_line(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("0.5\nfoo\n0.5\n")
    with pytest.raises(PriorFileError) as info:
        read_prior(path)
    assert info.value.line == 2
    assert "line 2" in str(info.value)


def test_read_prior_counts(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("1\n1\n2\n")
    assert read_prior(path, counts=True).probs.tolist() == [0.25, 0.25, 0.5]


def test_uniform_prior_moments():
    g = global_moments(PriorDistribution.uniform(10), LS10)
    assert g.mu_global == pytest.approx(4.5, abs=1e-12)
    assert g.sigma2_global == pytest.approx(8.25, abs=1e-12)


def test_local_moments_one_hot_and_smoothed():
    m = local_moments(np.eye(10)[3], LS10)
    assert m == (3.0, 0.0, 9.0)
    target = 0.9 * np.eye(10)[3] + 0.01
    m = local_moments(target, LS10)
    y = np.arange(10)
    assert m.mean == pytest.approx(float(target @ y))
    assert m.variance == pytest.approx(float(target @ (y - m.mean) ** 2))


# --- scalar solves ----------------------------------------------------------

def test_mean_at_e_inverse_target_gives_zero():
    sol = solve_mean(45 / math.e, LS10)
    assert sol.lambda_mu == pytest.approx(0.0, abs=1e-15)
    assert sol.iterations == 0


def test_variance_two_classes_closed_form():
    # only y=1 contributes: exp(-1 - lam) = target
    sol = solve_variance(0.5 / math.e, LabelSpace(2))
    assert sol.lambda_sigma2 == pytest.approx(math.log(2), abs=1e-12)


def test_mean_matches_bisection_oracle(rng):
    y = list(range(10))
    for target in rng.uniform(0.05, 60.0, size=50):
        f = lambda lam: unnormalized_moment(lam, y) - target  # noqa: E731
        expected = bisect(f, *bracket_root(f))
        assert solve_mean(target, LS10).lambda_mu == pytest.approx(expected, abs=1e-6)


def test_variance_matches_bisection_oracle(rng):
    y2 = [k * k for k in range(10)]
    for target in rng.uniform(0.05, 400.0, size=50):
        f = lambda lam: unnormalized_moment(lam, y2) - target  # noqa: E731
        expected = bisect(f, *bracket_root(f, step=0.1))
        assert solve_variance(target, LS10).lambda_sigma2 == pytest.approx(expected, abs=1e-6)


def test_mean_reference_example():
    # direct evaluation of the reference multiplier
    assert sum(math.exp(-1 - 0.3294 * k) * k for k in range(10)) == pytest.approx(2.7489, abs=5e-4)
    sol = solve_mean(2.7541, LS10)
    assert abs(sol.lambda_mu - 0.3294) <= 0.02
    assert abs(verify_constraints(sol, moment_targets(2.7541, 1.0, LS10), LS10)[0].residual) <= 1e-9


@pytest.mark.parametrize("target", [0.0, -1.0, float("nan")])
def test_mean_rejects_non_positive_targets(target):
    with pytest.raises(InfeasibleTargetError):
        solve_mean(target, LS10)


def test_iteration_cap_raises():
    with pytest.raises(ConvergenceError):
        solve_mean(0.01, LS10, max_iter=1)


def test_singular_jacobian_is_reported():
    feats = np.column_stack([np.arange(4.0), np.arange(4.0)])
    with pytest.raises(SingularJacobianError) as info:
        _newton(feats, [1.0, 1.0], 1e-12, 50, normalized=False)
    assert info.value.condition > 1e12


@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_mean_multiplier_decreases_with_target(a, b):
    if abs(a - b) < 1e-9:
        return
    lo, hi = sorted((a, b))
    assert solve_mean(lo, LS10).lambda_mu > solve_mean(hi, LS10).lambda_mu


@given(st.floats(0.01, 200.0))
def test_mean_back_substitution(target):
    sol = solve_mean(target, LS10)
    value = gibbs_pmf(sol, LS10, normalize=False).weights @ LS10.classes
    assert value == pytest.approx(target, rel=1e-12)


# --- joint solve ------------------------------------------------------------

def _random_cone_target(rng, k):
    """A strictly positive combination of the joint feature vectors centred on its own mean."""
    y = np.arange(k, dtype=float)
    a = rng.dirichlet(np.ones(k)) * rng.uniform(0.5, 3.0)
    mu = float(a @ y)
    return mu, float(a @ (y - mu) ** 2)


def test_joint_matches_grid_oracle(rng):
    checked = 0
    while checked < 50:
        mu, var = _random_cone_target(rng, 10)
        expected = joint_grid_root(10, mu, var)
        if np.linalg.norm(joint_residual(expected, 10, mu, var)) > 1e-9:
            continue  # root outside the oracle's search box
        sol = solve_joint(mu, var, LS10)
        assert sol.lambda_mu == pytest.approx(expected[0], abs=1e-6)
        assert sol.lambda_sigma2 == pytest.approx(expected[1], abs=1e-6)
        checked += 1


def test_joint_uniform_targets_back_substitute():
    sol = solve_joint(4.5, 8.25, LS10)
    checks = verify_constraints(sol, moment_targets(4.5, 8.25, LS10), LS10)
    assert all(abs(c.residual) <= 1e-9 for c in checks)


def test_joint_outside_cone_is_infeasible():
    # all the mass at the mean would need zero variance with a positive mean
    with pytest.raises(InfeasibleTargetError):
        solve_joint(4.5, 0.0, LS10)


# --- per-class multipliers --------------------------------------------------

def test_precompute_reference_class_one():
    prior = PriorDistribution.from_values(CIFAR10_PRIOR)
    sol = precompute_multipliers(prior, LS10, Form.MEAN, include_local=True)
    class1 = sol.for_label(1)
    # reference blended target 2.7541; the rounded prior (summing to 0.9999) gives 2.7538
    assert class1.targets[0] == pytest.approx(2.7541, abs=1e-3)
    assert abs(class1.lambda_mu - 0.3294) <= 0.02


@pytest.mark.parametrize("form", list(Form))
def test_precompute_every_class_back_substitutes(form):
    prior = PriorDistribution.from_values(CIFAR10_PRIOR)
    sol = precompute_multipliers(prior, LS10, form)
    constraints = global_moments(prior, LS10)
    assert len(sol.per_class) == 10
    for label in range(10):
        for check in verify_constraints(sol, constraints, LS10, label):
            assert abs(check.residual) <= 1e-6
            assert check.satisfied


def test_global_only_is_one_solve():
    sol = precompute_multipliers(PriorDistribution.uniform(10), LS10, Form.MEAN, include_local=False)
    assert sol.per_class is None
    assert sol.targets == (pytest.approx(4.5),)


def test_solution_requires_matching_multipliers():
    with pytest.raises(ValueError):
        LagrangeSolution(Form.MEAN, None, 1.0, 1, 0.0)


def test_report_lines_are_key_value():
    lines = solve_mean(2.7541, LS10).report_lines()
    assert lines[0] == "form=mean"
    assert all("=" in ln for ln in lines)
    assert any(ln.startswith("lambda_mu=0.32") for ln in lines)


# --- normalized (proper pmf) mode -------------------------------------------

def test_normalized_uniform_mean_is_uniform():
    dist = solve_normalized(moment_targets(4.5, 8.25, LS10), Form.MEAN, LS10)
    assert np.max(np.abs(dist.weights - 0.1)) <= 1e-6


def test_normalized_no_constraint_is_uniform():
    assert solve_normalized(None, None, LS10).weights.tolist() == [0.1] * 10


def test_normalized_higher_mean_tilts_up():
    dist = solve_normalized(moment_targets(6.5, 8.25, LS10), Form.MEAN, LS10)
    assert dist.mean(LS10) == pytest.approx(6.5, abs=1e-6)
    assert int(np.argmax(dist.weights)) > 4
    assert np.all(np.diff(dist.weights) > 0)


def test_normalized_wider_variance_raises_tails():
    dist = solve_normalized(moment_targets(4.5, 12.0, LS10), Form.VARIANCE, LS10)
    assert dist.variance(LS10) == pytest.approx(12.0, abs=1e-6)
    assert dist.weights[0] + dist.weights[9] > 0.2


def _slsqp_maxent(k, mu, var):
    y = np.arange(k, dtype=float)
    cons = [{"type": "eq", "fun": lambda p: p.sum() - 1},
            {"type": "eq", "fun": lambda p: p @ y - mu},
            {"type": "eq", "fun": lambda p: p @ (y - mu) ** 2 - var}]
    res = minimize(lambda p: float(np.sum(p * np.log(p))), np.full(k, 1 / k), method="SLSQP",
                   bounds=[(1e-12, 1)] * k, constraints=cons, options={"ftol": 1e-15, "maxiter": 1000})
    return res.x


@pytest.mark.filterwarnings("ignore:Values in x were outside bounds")
@pytest.mark.parametrize("mu,var", [(4.5, 8.25), (6.5, 8.25), (3.0, 5.0), (5.0, 12.0), (2.0, 3.0)])
def test_normalized_joint_matches_slsqp_oracle(mu, var):
    dist = solve_normalized(moment_targets(mu, var, LS10), Form.JOINT, LS10)
    assert np.max(np.abs(dist.weights - _slsqp_maxent(10, mu, var))) <= 1e-5


@pytest.mark.parametrize("mu,var", [(9.5, 1.0), (4.5, 0.1), (4.5, 25.0)])
def test_normalized_joint_outside_hull(mu, var):
    with pytest.raises(InfeasibleTargetError):
        solve_normalized(moment_targets(mu, var, LS10), Form.JOINT, LS10)


@given(st.floats(0.2, 8.8))
def test_normalized_mean_is_exact_and_maximal(mu):
    dist = solve_normalized(moment_targets(mu, 1.0, LS10), Form.MEAN, LS10)
    assert dist.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert dist.mean(LS10) == pytest.approx(mu, abs=1e-9)
    # log-weights are affine in y for the maximum-entropy solution
    assert np.allclose(np.diff(np.log(dist.weights), 2), 0.0, atol=1e-8)
