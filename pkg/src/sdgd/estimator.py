"""Gradient estimators that sample the PDE's per-dimension terms.

Every estimator targets the normalized loss

    L(theta) = 1/(2 N_r N^2) * sum_n (residual(x_n))^2,      N = n_terms,

whose full gradient is ``1/(N_r N^2) sum_n residual_n * d(residual_n)/dtheta``.
The residual factor may restrict its Laplacian sum to a forward index set J
(with N/|J| inflation) and the parameter pullback to a backward set I (with
N/|I| inflation); the exact remainder A(x) participates in both sides
unsampled.  The four public estimators differ only in how I and J are chosen:

* ``full_grad``      - I = J = all dimensions (exact gradient),
* ``grad_algo1``     - J = all dimensions, I sampled (unbiased),
* ``grad_algo2``     - I, J sampled independently (unbiased),
* ``grad_algo3``     - J = I, one sample reused (biased for |I| < N, fastest).

All four share one code path, so estimators at full index sets reproduce
``full_grad`` bit for bit.  Summation runs in ascending point order, then
ascending dimension order.  Term-evaluation counters tally the number of
distinct wrapped second derivatives computed, the unit of cost accounting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import network as net
from . import pde
from .errors import ContractError, ShapeError

__all__ = [
    "GradEstimate",
    "full_grad",
    "grad_algo1",
    "grad_algo2",
    "grad_algo3",
    "accumulate",
    "residual_values",
]


@dataclass(frozen=True)
class GradEstimate:
    """Estimator output plus instrumentation metadata."""

    grad: net.ParamGrad
    meta: dict


def _as_points(problem: pde.PdeProblem, points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != problem.d_in or x.shape[0] < 1:
        raise ShapeError(f"expected nonempty (B, {problem.d_in}) points, got {x.shape}")
    return x


def _as_dims(problem: pde.PdeProblem, dims, name: str) -> np.ndarray:
    arr = np.asarray(dims, dtype=int).ravel()
    if arr.size < 1:
        raise ValueError(f"{name} index set must be nonempty")
    if arr.min() < 0 or arr.max() >= problem.n_terms:
        raise IndexError(f"{name} index out of range [0, {problem.n_terms})")
    return np.sort(arr)


def _second_terms(problem, x, tape, dims, counts, keep):
    """Wrapped second derivatives for sorted unique dims, optionally taped.

    Returns (terms (B, K), dir_tape, raw_first (B, K)).
    """
    if dims.size == 0:
        B = x.shape[0]
        return np.zeros((B, 0)), None, np.zeros((B, 0))
    dirs = net.coordinate_directions(problem.d_in, dims)
    raw_f, raw_s, dir_tape = net.tangent_sweep(tape, dirs, second=True, keep=keep)
    terms = pde.wrapped_second_batch(problem, x, dims, tape.values, raw_f, raw_s)
    return terms, dir_tape, raw_f


def _hjb_tape_sweep(problem, x, tape, uniq_i):
    """One taped sweep over every input dim; seconds only on the pullback set."""
    all_dims = np.arange(problem.d_in)
    mask = np.isin(all_dims, uniq_i)
    dirs = net.coordinate_directions(problem.d_in, all_dims)
    raw_f, raw_s, dir_tape = net.tangent_sweep(tape, dirs, second=mask, keep=True)
    wf_all = pde.wrapped_first_batch(problem, x, all_dims, tape.values, raw_f)
    return raw_f, raw_s, dir_tape, wf_all, mask


def _estimate(problem, params, points, dims_i, dims_j, algorithm: str) -> GradEstimate:
    t0 = time.perf_counter()
    x = _as_points(problem, points)
    B = x.shape[0]
    n = problem.n_terms
    dims_i = _as_dims(problem, dims_i, "backward")
    dims_j = _as_dims(problem, dims_j, "forward")
    uniq_i, counts_i = np.unique(dims_i, return_counts=True)
    uniq_j, counts_j = np.unique(dims_j, return_counts=True)

    tape = net.forward_tape(params, x)
    wrapped_u = pde.wrapped_value_batch(problem, x, tape.values)

    if problem.is_hjb:
        raw_f_all, raw_s_all, dir_tape, wf_all, mask = _hjb_tape_sweep(
            problem, x, tape, uniq_i
        )
        terms_i = pde.wrapped_second_batch(
            problem, x, uniq_i, tape.values, raw_f_all[:, uniq_i], raw_s_all[:, uniq_i]
        )
        remainder = pde.remainder_batch(problem, x, wrapped_u, wf_all)
        tape_dims = np.arange(problem.d_in)
    else:
        terms_i, dir_tape, _ = _second_terms(problem, x, tape, uniq_i, counts_i, True)
        remainder = pde.remainder_batch(problem, x, wrapped_u)
        wf_all = None
        tape_dims = uniq_i

    # forward-only sampled terms (detached: no tape is kept for them)
    extra = np.setdiff1d(uniq_j, uniq_i)
    terms_extra, _, _ = _second_terms(problem, x, tape, extra, None, False)
    term_evals = B * (uniq_i.size + extra.size)

    # residual factor from the forward index multiset J
    in_i = np.isin(uniq_j, uniq_i)
    sum_j = np.zeros(B)
    if np.any(in_i):
        cols = np.searchsorted(uniq_i, uniq_j[in_i])
        sum_j += terms_i[:, cols] @ counts_j[in_i]
    if extra.size:
        cols = np.searchsorted(extra, uniq_j[~in_i])
        sum_j += terms_extra[:, cols] @ counts_j[~in_i]
    forcing = pde.forcing_many(problem, x)
    factor = remainder + (n / dims_j.size) * sum_j - forcing

    # raw-atom cotangents of d/dtheta [A + (N/|I|) sum_I s_i], scaled per point
    # by factor / (B N^2)
    weight = factor / (B * n * n)
    scale = n / dims_i.size
    a = np.zeros(B)
    b = np.zeros((B, tape_dims.size))
    c = np.zeros((B, tape_dims.size))
    cols_i = np.searchsorted(tape_dims, uniq_i)
    if problem.is_elliptic:
        fac = pde.wrapper_factor(problem, x)
        a += scale * counts_i.sum() * -2.0
        b[:, cols_i] += scale * counts_i * (-4.0 * x[:, uniq_i])
        c[:, cols_i] += scale * counts_i * fac[:, None]
        ra, rb = pde.remainder_cotangents_batch(problem, x, wrapped_u, None, tape_dims)
    else:
        fac = pde.wrapper_factor(problem, x)
        c[:, cols_i] += scale * counts_i * fac[:, None]
        ra, rb = pde.remainder_cotangents_batch(problem, x, wrapped_u, wf_all, tape_dims)
    a += ra
    b += rb
    flat = net.reverse_sweep(
        tape, dir_tape, weight * a, weight[:, None] * b, weight[:, None] * c
    )
    wall = time.perf_counter() - t0
    if not np.all(np.isfinite(factor)):
        raise ContractError("non-finite residual factor")
    return GradEstimate(
        grad=net.ParamGrad(flat),
        meta={
            "algorithm": algorithm,
            "n_points": B,
            "n_backward": int(dims_i.size),
            "n_forward": int(dims_j.size),
            "term_evals": int(term_evals),
            "wall_s": wall,
        },
    )


def full_grad(problem, params, points) -> GradEstimate:
    """Exact normalized-loss gradient using every dimension in both passes."""
    all_dims = np.arange(problem.n_terms)
    return _estimate(problem, params, points, all_dims, all_dims, "full")


def grad_algo1(problem, params, points, dims_i) -> GradEstimate:
    """Exact forward residual, pullback sampled on I with N/|I| inflation."""
    return _estimate(
        problem, params, points, dims_i, np.arange(problem.n_terms), "algo1"
    )


def grad_algo2(problem, params, points, dims_i, dims_j) -> GradEstimate:
    """Forward sampled on J, pullback sampled on I, drawn independently."""
    return _estimate(problem, params, points, dims_i, dims_j, "algo2")


def grad_algo3(problem, params, points, dims_i) -> GradEstimate:
    """One index set for both passes; biased for |I| < n_terms but cheapest."""
    return _estimate(problem, params, points, dims_i, dims_i, "algo3")


def accumulate(grads: list[GradEstimate]) -> GradEstimate:
    """Arithmetic mean of estimates; metadata counts are summed."""
    if not grads:
        raise ContractError("nothing to accumulate")
    size = grads[0].grad.data.size
    for g in grads:
        if g.grad.data.size != size:
            raise ContractError("parameter layouts differ across estimates")
    stacked = np.stack([g.grad.data for g in grads])
    tags = {g.meta["algorithm"] for g in grads}
    meta = {
        "algorithm": tags.pop() if len(tags) == 1 else "mixed",
        "n_points": grads[0].meta["n_points"],
        "n_backward": sum(g.meta["n_backward"] for g in grads),
        "n_forward": sum(g.meta["n_forward"] for g in grads),
        "term_evals": sum(g.meta["term_evals"] for g in grads),
        "wall_s": sum(g.meta["wall_s"] for g in grads),
        "accumulated": len(grads),
    }
    return GradEstimate(grad=net.ParamGrad(stacked.mean(axis=0)), meta=meta)


def residual_values(problem, params, points, dims_j) -> np.ndarray:
    """Batched residual estimates A + (N/|J|) sum_J s_j - R, no pullback."""
    x = _as_points(problem, points)
    dims_j = _as_dims(problem, dims_j, "forward")
    uniq_j, counts_j = np.unique(dims_j, return_counts=True)
    tape = net.forward_tape(params, x)
    wrapped_u = pde.wrapped_value_batch(problem, x, tape.values)
    if problem.is_hjb:
        all_dims = np.arange(problem.d_in)
        dirs = net.coordinate_directions(problem.d_in, all_dims)
        mask = np.isin(all_dims, uniq_j)
        raw_f, raw_s, _ = net.tangent_sweep(tape, dirs, second=mask, keep=False)
        wf_all = pde.wrapped_first_batch(problem, x, all_dims, tape.values, raw_f)
        terms = pde.wrapped_second_batch(
            problem, x, uniq_j, tape.values, raw_f[:, uniq_j], raw_s[:, uniq_j]
        )
        remainder = pde.remainder_batch(problem, x, wrapped_u, wf_all)
    else:
        terms, _, _ = _second_terms(problem, x, tape, uniq_j, None, False)
        remainder = pde.remainder_batch(problem, x, wrapped_u)
    total = terms @ counts_j
    forcing = pde.forcing_many(problem, x)
    return remainder + (problem.n_terms / dims_j.size) * total - forcing
