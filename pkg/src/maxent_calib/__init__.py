"""Maximum-entropy calibration losses, calibration metrics and a desk-scale shift benchmark."""

from .solver import (
    ConvergenceError,
    Form,
    InfeasibleTargetError,
    LabelSpace,
    LagrangeSolution,
    MomentConstraints,
    PriorDistribution,
    SingularJacobianError,
    SolverError,
    global_moments,
    read_prior,
    solve_joint,
    solve_mean,
    solve_normalized,
    solve_variance,
    verify_constraints,
)
from .losses import LossConfig, LossForm, loss_and_grad, precompute_multipliers
from .metrics import PredictionSet, all_metrics, read_predictions

__version__ = "0.1.0"
