"""Adam, learning-rate schedules, and adversarial residual-point ascent."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import network as net
from . import pde
from .errors import ConfigurationError, ContractError, UnsupportedOperationError
from .estimator import residual_values
from .sampling import RngStream, sample_dims

__all__ = [
    "AdamState",
    "LrSchedule",
    "init_adam",
    "adam_step",
    "lr_at",
    "adversarial_ascend",
]


@dataclass(frozen=True)
class AdamState:
    """First/second moment vectors in the canonical parameter layout."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: net.NetworkParams, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    n = net.param_count(params)
    return AdamState(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(
    state: AdamState, params: net.NetworkParams, grad: net.ParamGrad, lr: float
):
    """One bias-corrected Adam update; returns (params', state')."""
    g = grad.data
    if g.shape != state.m.shape or g.size != net.param_count(params):
        raise ContractError("gradient shape does not match optimizer state")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = net.flatten_params(params) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net.replace_params(params, theta), replace(state, m=m, v=v, step=t)


@dataclass(frozen=True)
class LrSchedule:
    """linear_to_zero reaches exactly 0 at total_steps; exponential decays
    by a fixed factor per step."""

    kind: str
    base_lr: float
    total_steps: int
    decay: float = 0.9995

    def __post_init__(self):
        if self.kind not in ("linear_to_zero", "exponential"):
            raise ConfigurationError(f"unknown schedule {self.kind!r}")
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a step; out-of-range steps clamp to the endpoints."""
    step = min(max(int(step), 0), schedule.total_steps)
    if schedule.kind == "linear_to_zero":
        if schedule.total_steps == 0:
            return schedule.base_lr
        return schedule.base_lr * (1.0 - step / schedule.total_steps)
    return schedule.base_lr * schedule.decay**step


def adversarial_ascend(
    problem: pde.PdeProblem,
    params: net.NetworkParams,
    points: np.ndarray,
    dims,
    steps: int,
    step_size: float,
    stream: RngStream,
) -> np.ndarray:
    """Signed-gradient ascent of each point on its squared residual.

    The residual is estimated with the given dimension batch on the first
    step and fresh draws of the same size afterwards.  Coordinate gradients
    come from central differences of the residual (h = 1e-4), which keeps
    the derivative engine at second order.  Time coordinates are clamped to
    [0, 1]; the spatial domain is all of R^d.
    """
    if not problem.is_hjb:
        raise UnsupportedOperationError("adversarial ascent is defined for HJB problems")
    pts = np.array(points, dtype=np.float64)
    dims = np.asarray(dims, dtype=int)
    h = 1e-4
    B, din = pts.shape
    eye = np.eye(din) * h
    for s in range(int(steps)):
        if s > 0:
            dims = sample_dims(
                problem.n_terms, dims.size, False, stream.child(counter=s)
            )
        r = residual_values(problem, params, pts, dims)
        # one batched evaluation over all +-h coordinate perturbations
        shifted = (pts[None, None, :, :] + np.array([1.0, -1.0])[:, None, None, None]
                   * eye[None, :, None, :]).reshape(-1, din)
        vals = residual_values(problem, params, shifted, dims).reshape(2, din, B)
        # d(r^2)/dx = 2 r dr/dx; the 2 cancels against the central-diff 1/(2h)
        grad = (r[None, :] * (vals[0] - vals[1]) / h).T
        pts += step_size * np.sign(grad)
        pts[:, problem.time_index] = np.clip(pts[:, problem.time_index], 0.0, 1.0)
    return pts
