"""Dimension-sampled gradient descent for physics-informed neural networks.

The package trains an MLP surrogate on high-dimensional PDE residuals while
sampling the per-dimension terms of the differential operator in the forward
and/or backward pass, keeping per-step cost and memory independent of the
full dimension.  A verification harness brute-force-checks the estimator
theory (unbiasedness, the variance law, bias decay, derivative-norm bounds).
"""

from . import analysis, cli, estimator, network, optimizer, pde, sampling, trainer
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DivergenceError,
    DomainError,
    EnumerationGuardError,
    ShapeError,
    UndefinedMetricError,
    UnsupportedOperationError,
)
from .estimator import GradEstimate, accumulate, full_grad, grad_algo1, grad_algo2, grad_algo3
from .network import (
    AtomCotangents,
    AtomValues,
    NetworkParams,
    ParamGrad,
    derivative_bundle,
    forward,
    init_params,
    param_pullback,
)
from .optimizer import AdamState, LrSchedule, adam_step, adversarial_ascend, lr_at
from .pde import PdeProblem, ResidualPieces, exact_solution, forcing, hjb_reference, make_problem
from .sampling import IndexBatch, RngStream, TestSet, make_test_set, sample_dims, sample_hjb_points, sample_unit_ball
from .trainer import RunReport, TrainConfig, emit_metrics, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
