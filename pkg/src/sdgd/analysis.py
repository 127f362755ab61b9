"""Verification harness for the estimator theory.

Exact enumeration wherever the combination count allows it: unbiasedness of
the sampled estimators, the three-constant variance law under
with-replacement sampling, the bias profile of the reused-index estimator,
spectral-norm bounds on network derivatives, and gradient-vs-finite-
difference checks.  Monte Carlo fallbacks report standard errors and use
3-standard-error acceptance.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import network as net
from . import pde
from .errors import (
    ConfigurationError,
    EnumerationGuardError,
    UnsupportedOperationError,
)
from .estimator import full_grad, grad_algo1, grad_algo2, grad_algo3
from .trainer import TrainConfig, train

__all__ = [
    "VarianceFit",
    "BoundCheck",
    "unbiasedness_check",
    "bias_profile_algo3",
    "variance_fit",
    "budget_minimizers",
    "lemma_bound_check",
    "fd_check",
    "batch_sweep",
    "ENUMERATION_GUARD",
]

ENUMERATION_GUARD = 1_000_000


def _guard(count: float) -> None:
    if count > ENUMERATION_GUARD:
        raise EnumerationGuardError(
            f"enumeration of {count:.3g} combinations exceeds guard {ENUMERATION_GUARD}"
        )


def _rel_dev(mean: np.ndarray, reference: np.ndarray) -> float:
    """Max coordinate deviation relative to the reference gradient's scale."""
    scale = np.max(np.abs(reference))
    if scale == 0.0:
        return float(np.max(np.abs(mean - reference)))
    return float(np.max(np.abs(mean - reference)) / scale)


def unbiasedness_check(problem, params, points, k: int, algorithm: str) -> float:
    """Exact mean over all equally likely index sets vs the full gradient.

    Enumerates the C(n, k) backward subsets (and independently the forward
    subsets for the two-sided estimator) on the fixed point batch.  Returns
    the max relative deviation of the enumerated mean from ``full_grad``.
    """
    n = problem.n_terms
    n_subsets = math.comb(n, k)
    if algorithm == "algo2":
        _guard(n_subsets * n_subsets)
    elif algorithm in ("algo1", "algo3"):
        _guard(n_subsets)
    else:
        raise ConfigurationError(f"no unbiasedness enumeration for {algorithm!r}")
    reference = full_grad(problem, params, points).grad.data
    subsets = list(itertools.combinations(range(n), k))
    total = np.zeros_like(reference)
    count = 0
    if algorithm == "algo1":
        for I in subsets:
            total += grad_algo1(problem, params, points, I).grad.data
            count += 1
    elif algorithm == "algo3":
        for I in subsets:
            total += grad_algo3(problem, params, points, I).grad.data
            count += 1
    else:
        for I in subsets:
            for J in subsets:
                total += grad_algo2(problem, params, points, I, J).grad.data
                count += 1
    return _rel_dev(total / count, reference)


def bias_profile_algo3(problem, params, points, ks) -> dict[int, float]:
    """Exact enumerated bias norm of the reused-index estimator per batch size."""
    n = problem.n_terms
    reference = full_grad(problem, params, points).grad.data
    out = {}
    for k in ks:
        _guard(math.comb(n, k))
        grads = [
            grad_algo3(problem, params, points, I).grad.data
            for I in itertools.combinations(range(n), k)
        ]
        out[int(k)] = float(np.linalg.norm(np.mean(grads, axis=0) - reference))
    return out


@dataclass(frozen=True)
class VarianceFit:
    """Least-squares fit of V(B, I) = C1/|B| + C2/|I| + C3/(|B||I|)."""

    c1: float
    c2: float
    c3: float
    grid: list[tuple[int, int, float]]  # (|B|, |I|, enumerated variance)
    residual: float  # relative fit residual


def _variance_atoms(problem, params, points):
    """Per-point, per-dimension gradient atoms of the normalized estimator.

    With replacement, the estimator over draws (B, I) equals
    mean_n [ h_n + mean_i k_{n,i} ] with h_n the remainder pullback and
    k_{n,i} the per-dimension pullback, both scaled by the point's exact
    residual.
    """
    x = np.asarray(points, dtype=np.float64)
    n_r, n = x.shape[0], problem.n_terms
    res = np.zeros(n_r)
    h = []
    k = []
    for b in range(n_r):
        if problem.is_hjb:
            atoms = pde.wrapped_atoms(
                problem, params, x[b, : problem.d], x[b, problem.d], range(n)
            )
        else:
            atoms = pde.wrapped_atoms(problem, params, x[b], None, range(n))
        pieces = pde.residual_pieces(problem, atoms, range(n))
        res[b] = pde.residual_estimate(problem, pieces, range(n))
        full_cot = pde.residual_cotangents(problem, atoms, range(n))
        # remainder-only cotangents: subtract the sampled-term part
        ks = []
        for i in range(n):
            ci = pde.residual_cotangents(problem, atoms, [i])
            ks.append(ci)
        # sampled part of dim i at inflation n/1 is (c_i - remainder); recover
        # the plain per-dim pullback k_{b,i} = res * d(s_i)/dtheta / n
        rem_cot = _remainder_only_cotangents(problem, atoms)
        h.append(
            res[b]
            * net.param_pullback(params, atoms.point, rem_cot).data
            / (n * n)
        )
        row = []
        for i in range(n):
            only_i = _subtract_cotangents(ks[i], rem_cot)
            gi = net.param_pullback(params, atoms.point, only_i).data / n  # n/|I|=n cancels one n
            row.append(res[b] * gi / n)
        k.append(row)
    h = np.array(h)  # (n_r, P)
    k = np.array(k)  # (n_r, n, P)
    # sanity: mean over all atoms reproduces the full normalized gradient
    return res, h, k


def _remainder_only_cotangents(problem, atoms) -> net.AtomCotangents:
    if problem.is_elliptic:
        x = atoms.point[None, :]
        ra, rb = pde.remainder_cotangents_batch(
            problem, x, np.array([atoms.value]), None, []
        )
        return net.AtomCotangents(a=float(ra[0]), b={}, c={})
    fdims = list(range(problem.d + 1))
    wfa = np.array([[atoms.first[i] for i in fdims]])
    ra, rb = pde.remainder_cotangents_batch(
        problem, atoms.point[None, :], np.array([atoms.value]), wfa, fdims
    )
    b = {i: float(rb[0, kk]) for kk, i in enumerate(fdims) if rb[0, kk] != 0.0}
    return net.AtomCotangents(a=float(ra[0]), b=b, c={})


def _subtract_cotangents(total: net.AtomCotangents, part: net.AtomCotangents):
    b = dict(total.b)
    for i, v in part.b.items():
        b[i] = b.get(i, 0.0) - v
    c = dict(total.c)
    return net.AtomCotangents(a=total.a - part.a, b=b, c=c)


def variance_fit(problem, params, points, grid, mc_samples: int = 100_000,
                 seed: int = 0) -> VarianceFit:
    """Variance of the with-replacement estimator over a (|B|, |I|) grid.

    Each cell enumerates all N_r^|B| * n^|I| equally likely draw tuples when
    that count fits the guard, otherwise falls back to Monte Carlo with
    ``mc_samples`` tuples.  Variance is the trace of the coordinatewise
    covariance.  The three-constant law is then fit by least squares.
    """
    grid = [(int(b), int(i)) for b, i in grid]
    if len(grid) < 4:
        raise ConfigurationError("variance fit needs at least 4 grid cells")
    x = np.asarray(points, dtype=np.float64)
    n_r, n = x.shape[0], problem.n_terms
    res, h, k = _variance_atoms(problem, params, points)
    cells = []
    rng = np.random.default_rng(seed)
    for nb, ni in grid:
        count = float(n_r) ** nb * float(n) ** ni
        if count <= ENUMERATION_GUARD:
            var = _cell_variance_exact(h, k, nb, ni)
        else:
            var = _cell_variance_mc(h, k, nb, ni, mc_samples, rng)
        cells.append((nb, ni, var))
    rows = np.array([[1.0 / b, 1.0 / i, 1.0 / (b * i)] for b, i, _ in cells])
    vals = np.array([v for _, _, v in cells])
    coef, *_ = np.linalg.lstsq(rows, vals, rcond=None)
    fitted = rows @ coef
    residual = float(np.linalg.norm(fitted - vals) / max(np.linalg.norm(vals), 1e-300))
    return VarianceFit(float(coef[0]), float(coef[1]), float(coef[2]), cells, residual)


def _cell_variance_exact(h, k, nb, ni) -> float:
    n_r, n, P = k.shape
    point_tuples = list(itertools.product(range(n_r), repeat=nb))
    dim_tuples = list(itertools.product(range(n), repeat=ni))
    mean = np.zeros(P)
    sq = 0.0
    samples = []
    for bt in point_tuples:
        hb = h[list(bt)].mean(axis=0)  # (P,)
        kb = k[list(bt)].mean(axis=0)  # (n, P)
        for it in dim_tuples:
            g = hb + kb[list(it)].mean(axis=0)
            samples.append(g)
    samples = np.array(samples)
    mean = samples.mean(axis=0)
    return float(np.mean(np.sum((samples - mean) ** 2, axis=1)))


def _cell_variance_mc(h, k, nb, ni, n_samples, rng) -> float:
    n_r, n, P = k.shape
    acc = np.zeros(P)
    acc2 = 0.0
    samples = np.empty((n_samples, P))
    for s in range(n_samples):
        bt = rng.integers(0, n_r, size=nb)
        it = rng.integers(0, n, size=ni)
        samples[s] = h[bt].mean(axis=0) + k[bt][:, it].mean(axis=(0, 1))
    mean = samples.mean(axis=0)
    return float(np.mean(np.sum((samples - mean) ** 2, axis=1)))


def budget_minimizers(fit: VarianceFit, budget: int):
    """(fitted argmin, enumerated argmin) among grid cells with |B||I| <= budget."""
    feasible = [(b, i, v) for b, i, v in fit.grid if b * i <= budget]
    if not feasible:
        raise ConfigurationError(f"no grid cell within budget {budget}")
    fitted_val = lambda b, i: fit.c1 / b + fit.c2 / i + fit.c3 / (b * i)
    by_fit = min(feasible, key=lambda cell: fitted_val(cell[0], cell[1]))
    by_enum = min(feasible, key=lambda cell: cell[2])
    return (by_fit[0], by_fit[1]), (by_enum[0], by_enum[1])


@dataclass(frozen=True)
class BoundCheck:
    """One derivative-norm bound evaluation: margin = bound - norm."""

    order: int
    norm: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.norm


def _assumption_form(params: net.NetworkParams) -> tuple[net.NetworkParams, float]:
    """Rewrite the net so its activation satisfies the smoothness bounds.

    sin qualifies as-is.  tanh needs the 1/2 prescaling absorbed into the
    weights of every layer past the first: the function is unchanged, while
    the effective activation becomes (1/2) tanh whose derivatives through
    third order are bounded by one.
    """
    if params.biases is not None:
        raise UnsupportedOperationError("derivative bounds assume a bias-free network")
    if params.activation == "sin":
        return params, 1.0
    if params.activation == "tanh":
        c = 0.5
        weights = [w.copy() for w in params.weights]
        for l in range(1, len(weights)):
            weights[l] = weights[l] / c
        return (
            net.NetworkParams(params.widths, tuple(weights), None, params.activation),
            c,
        )
    raise UnsupportedOperationError(f"no bound form for activation {params.activation!r}")


def _hessian_and_pullbacks(params, x, want_param_jacobian=True):
    """Full Hessian by polarization of second directional derivatives.

    H_ij = (D2_{e_i+e_j} - D2_{e_i} - D2_{e_j}) / 2, each term an exact
    directional second derivative; the same identity transfers to the
    parameter Jacobian of the Hessian via directional pullbacks.
    """
    d = params.d_in
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    dirs = []
    for i, j in pairs:
        v = np.zeros(d)
        v[i] += 1.0
        v[j] += 1.0
        dirs.append(v)
    tape = net.forward_tape(params, x[None, :])
    _, d2, dir_tape = net.tangent_sweep(tape, np.array(dirs), second=True, keep=True)

    hess = np.zeros((d, d))
    diag = {}
    for idx, (i, j) in enumerate(pairs):
        if i == j:
            diag[i] = d2[0, idx] / 4.0  # direction 2*e_i scales D2 by 4
    for idx, (i, j) in enumerate(pairs):
        if i == j:
            hess[i, i] = diag[i]
        else:
            hess[i, j] = hess[j, i] = (d2[0, idx] - diag[i] - diag[j]) / 2.0
    if not want_param_jacobian:
        return hess, None
    P = net.param_count(params)
    pull = np.zeros((len(pairs), P))
    for idx in range(len(pairs)):
        c = np.zeros((1, len(pairs)))
        c[0, idx] = 1.0
        pull[idx] = net.reverse_sweep(tape, dir_tape, np.zeros(1), None, c)
    jac = np.zeros((d, d, P))
    diag_pull = {i: pull[idx] / 4.0 for idx, (i, j) in enumerate(pairs) if i == j}
    for idx, (i, j) in enumerate(pairs):
        if i == j:
            jac[i, i] = diag_pull[i]
        else:
            jac[i, j] = jac[j, i] = (pull[idx] - diag_pull[i] - diag_pull[j]) / 2.0
    return hess, jac


def lemma_bound_check(params: net.NetworkParams, x, order: int):
    """Spectral-norm bounds on the derivative tensor and its parameter Jacobian.

    Returns a (derivative check, parameter-derivative check) pair for the
    requested order (1 or 2).  Bias-free networks only; depth must exceed 1
    for the parameter bound, which degenerates at a single linear layer.
    """
    if order not in (1, 2):
        raise ConfigurationError("bounds are implemented for orders 1 and 2")
    x = np.asarray(x, dtype=np.float64)
    form, _ = _assumption_form(params)
    L = form.depth
    d = form.d_in
    h_width = max(form.widths)
    m = [max(np.linalg.norm(w, 2), 1.0) for w in form.weights]
    m_prod = float(np.prod(m[:-1])) if L > 1 else 1.0
    m_last = m[-1]

    def bound_deriv(n):
        return math.factorial(n - 1) * d ** (n - 1) * (L - 1) ** (n - 1) * m_last * (
            float(np.prod([mi**n for mi in m[:-1]])) if L > 1 else 1.0
        )

    def bound_param(n):
        return (
            h_width**2
            * math.factorial(n)
            * d**n
            * (L - 1) ** n
            * m_last
            * (float(np.prod([mi ** (n + 1) for mi in m[:-1]])) if L > 1 else 1.0)
            * max(float(np.linalg.norm(x)), 1.0)
        )

    tape = net.forward_tape(params, x[None, :])
    if order == 1:
        dirs = net.coordinate_directions(d, range(d))
        first, _, dir_tape = net.tangent_sweep(tape, dirs, second=False, keep=True)
        norm1 = float(np.linalg.norm(first[0]))
        P = net.param_count(params)
        jac = np.zeros((d, P))
        for i in range(d):
            b = np.zeros((1, d))
            b[0, i] = 1.0
            jac[i] = net.reverse_sweep(tape, dir_tape, np.zeros(1), b, None)
        normp = float(np.linalg.norm(jac.ravel()))
        checks = (
            BoundCheck(1, norm1, float(bound_deriv(1))),
            BoundCheck(1, normp, float(bound_param(1))),
        )
    else:
        if L < 2:
            raise UnsupportedOperationError(
                "parameter bound for order 2 needs at least one hidden layer"
            )
        hess, jac = _hessian_and_pullbacks(params, x)
        checks = (
            BoundCheck(2, float(np.linalg.norm(hess.ravel())), float(bound_deriv(2))),
            BoundCheck(2, float(np.linalg.norm(jac.ravel())), float(bound_param(2))),
        )
    return checks


def fd_check(params: net.NetworkParams, x, dims) -> dict[str, float]:
    """Central-difference agreement report for the derivative engine.

    Inputs use h = 1e-3, parameters h = 1e-4.  Errors are measured relative
    to each derivative vector's max magnitude (floored at 1e-8): the FD
    truncation term scales with the function's higher derivatives, so a
    per-component relative error is meaningless for tiny components.
    """
    x = np.asarray(x, dtype=np.float64)
    dims = sorted(int(i) for i in dims)
    bundle = net.derivative_bundle(params, x, second_dims=dims)
    h = 1e-3
    an1 = np.array([bundle.first[i] for i in dims])
    an2 = np.array([bundle.second[i] for i in dims])
    fd1 = np.empty(len(dims))
    fd2 = np.empty(len(dims))
    mid = net.forward(params, x)
    for k, i in enumerate(dims):
        e = np.zeros(params.d_in)
        e[i] = h
        up, dn = net.forward(params, x + e), net.forward(params, x - e)
        fd1[k] = (up - dn) / (2 * h)
        fd2[k] = (up - 2 * mid + dn) / (h * h)
    worst1 = float(np.max(np.abs(an1 - fd1)) / max(np.max(np.abs(an1)), 1e-8))
    worst2 = float(np.max(np.abs(an2 - fd2)) / max(np.max(np.abs(an2)), 1e-8))
    cot = net.AtomCotangents(
        a=0.5,
        b={i: 1.0 + 0.1 * i for i in dims},
        c={i: 1.0 - 0.05 * i for i in dims},
    )
    grad = net.param_pullback(params, x, cot).data
    flat = net.flatten_params(params)
    hp = 1e-4

    def scalar(vec):
        p2 = net.replace_params(params, vec)
        bb = net.derivative_bundle(p2, x, second_dims=dims)
        return (
            cot.a * bb.value
            + sum(v * bb.first[i] for i, v in cot.b.items())
            + sum(v * bb.second[i] for i, v in cot.c.items())
        )

    fdp = np.empty(flat.size)
    for j in range(flat.size):
        vec = flat.copy()
        vec[j] += hp
        up = scalar(vec)
        vec[j] -= 2 * hp
        dn = scalar(vec)
        fdp[j] = (up - dn) / (2 * hp)
    worstp = float(np.max(np.abs(grad - fdp)) / max(np.max(np.abs(grad)), 1e-8))
    return {"first": worst1, "second": worst2, "pullback": worstp}


def batch_sweep(base: TrainConfig, grid) -> list[dict]:
    """One training run per (|I|, |B|) cell; reports accuracy and unit costs.

    Rows carry the cell sizes, final relative L2 error, mean seconds per
    iteration, total seconds, term-evaluation count, and seconds per term.
    """
    rows = []
    for ni, nb in grid:
        cfg = dc_replace(base, dims_backward=int(ni), dims_forward=int(ni),
                         batch_points=int(nb))
        t0 = time.perf_counter()
        report = train(cfg)
        total = time.perf_counter() - t0
        terms = report.final["term_evals"]
        rows.append(
            {
                "dims_backward": int(ni),
                "batch_points": int(nb),
                "rel_l2": report.final["rel_l2"],
                "s_per_it": total / max(cfg.epochs, 1),
                "total_s": total,
                "term_evals": terms,
                "s_per_term": total / max(terms, 1),
            }
        )
    return rows
