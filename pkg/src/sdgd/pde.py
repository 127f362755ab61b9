"""PDE problems decomposed as residual = A(x) + sum_i s_i(x) - R(x).

Each problem carries a family of ``n_terms = d`` sampled terms (the wrapped
per-dimension second derivatives), an exact cheap remainder A (the zeroth/
first-order part that never gets sampled), a forcing term R, an exact or
reference solution, and the hard-constraint wrapper that builds the actual
model from the raw network:

* elliptic kinds on the unit ball: ``u~(x) = (1 - |x|^2) u(x)``, which is
  identically zero on the sphere;
* HJB kinds on R^d x [0,1]: ``u~(x, t) = (1 - t) u(x, t) + g(x)``, which
  matches the terminal cost at t = 1.  The network input is (x, t) with t
  in the trailing coordinate (index d).

The product rule of the wrapper is applied here, not in the network, and all
batched helpers operate on (B, d_in) point arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as net
from .errors import (
    ConfigurationError,
    ContractError,
    DomainError,
    ShapeError,
)

__all__ = [
    "ELLIPTIC_KINDS",
    "HJB_KINDS",
    "KINDS",
    "PdeProblem",
    "ResidualPieces",
    "make_problem",
    "exact_solution",
    "exact_solution_many",
    "forcing",
    "forcing_many",
    "wrapped_atoms",
    "residual_pieces",
    "residual_estimate",
    "residual_cotangents",
    "hjb_reference",
]

ELLIPTIC_KINDS = ("poisson", "allen_cahn", "sine_gordon")
HJB_KINDS = ("hjb_log", "hjb_rosenbrock")
KINDS = ELLIPTIC_KINDS + HJB_KINDS


@dataclass(frozen=True)
class PdeProblem:
    """Immutable problem description; safe to share across workers."""

    kind: str
    d: int
    seed: int
    coeffs: np.ndarray | None = None  # elliptic solution coefficients (d-1,)
    rosen_c1: np.ndarray | None = None  # Rosenbrock cost coefficients (d-1,)
    rosen_c2: np.ndarray | None = None

    @property
    def is_elliptic(self) -> bool:
        return self.kind in ELLIPTIC_KINDS

    @property
    def is_hjb(self) -> bool:
        return self.kind in HJB_KINDS

    @property
    def d_in(self) -> int:
        """Network input size: d, plus a trailing time coordinate for HJB."""
        return self.d + 1 if self.is_hjb else self.d

    @property
    def n_terms(self) -> int:
        """Size of the sampled term family (one Laplacian term per dimension)."""
        return self.d

    @property
    def time_index(self) -> int:
        if not self.is_hjb:
            raise ConfigurationError(f"{self.kind} has no time coordinate")
        return self.d


def make_problem(kind: str, d: int, seed: int = 0) -> PdeProblem:
    """Draw problem coefficients; deterministic given (kind, d, seed)."""
    if kind not in KINDS:
        raise ConfigurationError(f"unknown problem kind {kind!r}")
    if d < 2:
        raise ConfigurationError("problem dimension must be at least 2")
    rng = np.random.default_rng(seed)
    if kind in ELLIPTIC_KINDS:
        return PdeProblem(kind, d, seed, coeffs=rng.standard_normal(d - 1))
    if kind == "hjb_rosenbrock":
        c1 = rng.uniform(0.5, 1.5, size=d - 1)
        c2 = rng.uniform(0.5, 1.5, size=d - 1)
        return PdeProblem(kind, d, seed, rosen_c1=c1, rosen_c2=c2)
    return PdeProblem(kind, d, seed)


def _check_points(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != problem.d_in:
        raise ShapeError(f"expected (B, {problem.d_in}) points, got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# elliptic exact solution and closed-form forcing


def _pair_phase(problem: PdeProblem, x: np.ndarray):
    """Pairwise phase h_k = x_k + cos(x_{k+1}) + x_{k+1} cos(x_k), batched."""
    xk = x[:, :-1]
    xk1 = x[:, 1:]
    return xk, xk1, xk + np.cos(xk1) + xk1 * np.cos(xk)


def _oscillator(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    """psi(x) = sum_k c_k sin(h_k), the unwrapped part of the exact solution."""
    _, _, h = _pair_phase(problem, x)
    return np.sin(h) @ problem.coeffs


def exact_solution_many(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    """Exact solution on a batch of elliptic points."""
    if not problem.is_elliptic:
        raise ConfigurationError("batched exact solution is closed-form for elliptic kinds only")
    x = _check_points(problem, x)
    r2 = np.einsum("bi,bi->b", x, x)
    if np.any(r2 > 1.0 + 1e-12):
        raise DomainError("point outside the closed unit ball")
    return (1.0 - r2) * _oscillator(problem, x)


def exact_solution(problem: PdeProblem, x: np.ndarray, t: float | None = None) -> float:
    """Exact solution at one point (reference evaluation for HJB kinds)."""
    x = np.asarray(x, dtype=np.float64)
    if problem.is_elliptic:
        if t is not None:
            raise ConfigurationError("elliptic problems take no time argument")
        return float(exact_solution_many(problem, x[None, :])[0])
    if t is None:
        raise ConfigurationError("HJB problems require a time argument")
    if not 0.0 <= t <= 1.0:
        raise DomainError("t must lie in [0, 1]")
    from .sampling import RngStream  # deferred: sampling imports pde lazily too

    return hjb_reference(problem, x, t, 100_000, RngStream(problem.seed, purpose="exact"))


def _exact_gradients(problem: PdeProblem, x: np.ndarray):
    """First and diagonal-second derivatives of the oscillator psi."""
    xk, xk1, h = _pair_phase(problem, x)
    sh, ch = np.sin(h), np.cos(h)
    c = problem.coeffs
    dh_a = 1.0 - xk1 * np.sin(xk)  # dh_k / dx_k
    dh_b = np.cos(xk) - np.sin(xk1)  # dh_k / dx_{k+1}
    d2h_a = -xk1 * np.cos(xk)
    d2h_b = -np.cos(xk1)
    B, d = x.shape
    dpsi = np.zeros((B, d))
    d2psi = np.zeros((B, d))
    dpsi[:, :-1] += c * ch * dh_a
    dpsi[:, 1:] += c * ch * dh_b
    d2psi[:, :-1] += c * (-sh * dh_a * dh_a + ch * d2h_a)
    d2psi[:, 1:] += c * (-sh * dh_b * dh_b + ch * d2h_b)
    return dpsi, d2psi


def _exact_laplacian(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    """Closed-form Laplacian of the wrapped exact solution."""
    r2 = np.einsum("bi,bi->b", x, x)
    psi = _oscillator(problem, x)
    dpsi, d2psi = _exact_gradients(problem, x)
    return (
        -2.0 * problem.d * psi
        - 4.0 * np.einsum("bi,bi->b", x, dpsi)
        + (1.0 - r2) * d2psi.sum(axis=1)
    )


def forcing_many(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    """Forcing R(x) on a batch of points (zero for HJB kinds)."""
    x = _check_points(problem, x)
    if problem.is_hjb:
        return np.zeros(x.shape[0])
    lap = _exact_laplacian(problem, x)
    if problem.kind == "poisson":
        return lap
    u = exact_solution_many(problem, x)
    if problem.kind == "allen_cahn":
        return lap + u - u**3
    return lap + np.sin(u)  # sine_gordon


def forcing(problem: PdeProblem, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if problem.is_hjb:
        return 0.0
    return float(forcing_many(problem, x[None, :])[0])


# ---------------------------------------------------------------------------
# HJB terminal costs g(x): value, gradient, diagonal Hessian, closed form


def _g_value(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    if problem.kind == "hjb_log":
        s = 1.0 + np.einsum("bi,bi->b", x, x)
        return np.log(s) - np.log(2.0)
    q = (
        1.0
        + (problem.rosen_c1 * (x[:, :-1] - x[:, 1:]) ** 2).sum(axis=1)
        + (problem.rosen_c2 * x[:, 1:] ** 2).sum(axis=1)
    )
    return np.log(q) - np.log(2.0)


def _g_quadratic(problem: PdeProblem, x: np.ndarray):
    """(Q, dQ, diag d2Q) for the inner quadratic of the cost, batched."""
    B, d = x.shape
    if problem.kind == "hjb_log":
        q = 1.0 + np.einsum("bi,bi->b", x, x)
        dq = 2.0 * x
        d2q = np.full((B, d), 2.0)
        return q, dq, d2q
    c1, c2 = problem.rosen_c1, problem.rosen_c2
    diff = x[:, :-1] - x[:, 1:]
    q = 1.0 + (c1 * diff**2).sum(axis=1) + (c2 * x[:, 1:] ** 2).sum(axis=1)
    dq = np.zeros((B, d))
    dq[:, :-1] += 2.0 * c1 * diff
    dq[:, 1:] += -2.0 * c1 * diff + 2.0 * c2 * x[:, 1:]
    d2q = np.zeros((B, d))
    d2q[:, :-1] += 2.0 * c1
    d2q[:, 1:] += 2.0 * c1 + 2.0 * c2
    return q, dq, d2q


def _g_grad(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    q, dq, _ = _g_quadratic(problem, x)
    return dq / q[:, None]


def _g_diag_hess(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    q, dq, d2q = _g_quadratic(problem, x)
    return d2q / q[:, None] - (dq / q[:, None]) ** 2


def hjb_reference(problem: PdeProblem, x, t: float, n_mc: int, stream) -> float:
    """-log E[exp(-g(x - sqrt(2(1-t)) y))], y ~ N(0, I), by Monte Carlo.

    Evaluated in log-sum-exp form so the expectation never overflows.
    Deterministic given the stream.
    """
    if not problem.is_hjb:
        raise ConfigurationError("reference values are defined for HJB kinds only")
    if not 0.0 <= t <= 1.0:
        raise DomainError("t must lie in [0, 1]")
    if n_mc < 1:
        raise ConfigurationError("n_mc must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.d,):
        raise ShapeError(f"expected spatial point of shape ({problem.d},)")
    y = stream.generator().standard_normal((int(n_mc), problem.d))
    z = x[None, :] - np.sqrt(2.0 * (1.0 - t)) * y
    v = -_g_value(problem, z)
    m = v.max()
    return float(-(m + np.log(np.exp(v - m).mean())))


# ---------------------------------------------------------------------------
# hard-constraint wrapper algebra (batched)


def wrapper_factor(problem: PdeProblem, x: np.ndarray) -> np.ndarray:
    """Multiplier on the raw network: 1-|x|^2 (elliptic) or 1-t (HJB)."""
    if problem.is_elliptic:
        return 1.0 - np.einsum("bi,bi->b", x, x)
    return 1.0 - x[:, problem.time_index]


def wrapped_value_batch(problem, x, raw_u):
    if problem.is_elliptic:
        return wrapper_factor(problem, x) * raw_u
    return wrapper_factor(problem, x) * raw_u + _g_value(problem, x[:, : problem.d])


def wrapped_first_batch(problem, x, dims, raw_u, raw_first):
    """First derivatives of the wrapped model for the given dims.

    ``raw_first[:, k]`` must be the raw du/dx over ``dims[k]``.
    """
    dims = np.asarray(dims, dtype=int)
    fac = wrapper_factor(problem, x)[:, None]
    if problem.is_elliptic:
        return -2.0 * x[:, dims] * raw_u[:, None] + fac * raw_first
    out = fac * raw_first
    spatial = dims < problem.d
    if np.any(spatial):
        g1 = _g_grad(problem, x[:, : problem.d])
        out[:, spatial] += g1[:, dims[spatial]]
    tmask = dims == problem.time_index
    if np.any(tmask):
        out[:, tmask] += -raw_u[:, None]
    return out


def wrapped_second_batch(problem, x, dims, raw_u, raw_first, raw_second):
    """Diagonal second derivatives of the wrapped model for the given dims."""
    dims = np.asarray(dims, dtype=int)
    fac = wrapper_factor(problem, x)[:, None]
    if problem.is_elliptic:
        return (
            -2.0 * raw_u[:, None]
            - 4.0 * x[:, dims] * raw_first
            + fac * raw_second
        )
    if np.any(dims >= problem.d):
        raise ContractError("HJB sampled terms are spatial second derivatives only")
    g2 = _g_diag_hess(problem, x[:, : problem.d])
    return fac * raw_second + g2[:, dims]


def remainder_batch(problem, x, wrapped_u, wrapped_first_all=None):
    """Exact remainder A(x): the never-sampled part of the residual.

    For HJB, ``wrapped_first_all`` must hold the wrapped first derivatives
    over all d+1 input dims (time last).
    """
    if problem.kind == "poisson":
        return np.zeros_like(wrapped_u)
    if problem.kind == "allen_cahn":
        return wrapped_u - wrapped_u**3
    if problem.kind == "sine_gordon":
        return np.sin(wrapped_u)
    if wrapped_first_all is None or wrapped_first_all.shape[1] != problem.d + 1:
        raise ContractError("HJB remainder needs wrapped first derivatives on all dims")
    grad = wrapped_first_all[:, : problem.d]
    dt = wrapped_first_all[:, problem.d]
    return dt - np.einsum("bi,bi->b", grad, grad)


def remainder_cotangents_batch(problem, x, wrapped_u, wrapped_first_all, dims):
    """Raw-atom cotangents (a, b over dims) of the remainder A.

    ``dims`` lists the first-derivative atoms available in the reverse tape;
    for HJB it must include all d+1 dims.
    """
    B = x.shape[0]
    dims = list(int(i) for i in dims)
    a = np.zeros(B)
    b = np.zeros((B, len(dims)))
    fac = wrapper_factor(problem, x)
    if problem.kind == "poisson":
        return a, b
    if problem.kind == "allen_cahn":
        return (1.0 - 3.0 * wrapped_u**2) * fac, b
    if problem.kind == "sine_gordon":
        return np.cos(wrapped_u) * fac, b
    # HJB: A = dt(u~) - |grad u~|^2 with u~ = (1-t) u + g(x).
    col = {i: k for k, i in enumerate(dims)}
    missing = [i for i in range(problem.d + 1) if i not in col]
    if missing:
        raise ContractError(f"HJB remainder cotangents need first atoms on dims {missing}")
    a += -1.0  # d/du of dt(u~) = d/du[-u + (1-t) du/dt]
    b[:, col[problem.time_index]] += fac
    for j in range(problem.d):
        b[:, col[j]] += -2.0 * wrapped_first_all[:, col[j]] * fac
    return a, b


# ---------------------------------------------------------------------------
# per-point operations on atom bundles


@dataclass(frozen=True)
class ResidualPieces:
    """Remainder, per-dimension sampled terms, and forcing at one point."""

    remainder: float
    sampled_terms: dict[int, float]
    forcing: float


def wrapped_atoms(
    problem: PdeProblem,
    params: net.NetworkParams,
    x: np.ndarray,
    t: float | None = None,
    second_dims=(),
) -> net.AtomValues:
    """Atoms of the wrapped model at one point.

    Elliptic problems report first/second derivatives on ``second_dims``.
    HJB problems additionally report first derivatives on every input dim
    (the remainder needs the full gradient and the time derivative).
    """
    x = np.asarray(x, dtype=np.float64)
    if problem.is_elliptic:
        if t is not None:
            raise ConfigurationError("elliptic problems take no time argument")
        xin = x[None, :]
        first_dims = sorted(int(i) for i in set(second_dims))
    else:
        if t is None:
            raise ConfigurationError("HJB problems require a time argument")
        xin = np.concatenate([x, [t]])[None, :]
        first_dims = list(range(problem.d + 1))
    xin = _check_points(problem, xin)
    sdims = sorted(int(i) for i in set(second_dims))
    if any(i >= problem.d for i in sdims):
        raise IndexError("sampled term index out of range")
    raw = net.derivative_bundle(params, xin[0], second_dims=sdims, first_dims=first_dims)
    raw_u = np.array([raw.value])
    fdims = sorted(set(first_dims) | set(sdims))
    raw_f = np.array([[raw.first[i] for i in fdims]])
    raw_s = np.array([[raw.second[i] for i in sdims]])
    wu = wrapped_value_batch(problem, xin, raw_u)
    wf = wrapped_first_batch(problem, xin, fdims, raw_u, raw_f) if fdims else raw_f
    ws = (
        wrapped_second_batch(
            problem, xin, sdims, raw_u, np.array([[raw.first[i] for i in sdims]]), raw_s
        )
        if sdims
        else raw_s
    )
    return net.AtomValues(
        point=xin[0],
        dims=tuple(sdims),
        value=float(wu[0]),
        first={i: float(wf[0, k]) for k, i in enumerate(fdims)},
        second={i: float(ws[0, k]) for k, i in enumerate(sdims)},
    )


def residual_pieces(
    problem: PdeProblem, atoms: net.AtomValues, forward_dims
) -> ResidualPieces:
    """Split the residual at one point into remainder + sampled terms - forcing."""
    dims = sorted(int(i) for i in set(forward_dims))
    missing = [i for i in dims if i not in atoms.second]
    if missing:
        raise ContractError(f"atoms missing second derivatives for dims {missing}")
    x = atoms.point[None, :]
    if problem.is_hjb:
        need = set(range(problem.d + 1))
        if not need.issubset(atoms.first):
            raise ContractError("HJB remainder needs all first derivatives")
        wfa = np.array([[atoms.first[i] for i in range(problem.d + 1)]])
        remainder = float(remainder_batch(problem, x, np.array([atoms.value]), wfa)[0])
        rf = 0.0
    else:
        remainder = float(remainder_batch(problem, x, np.array([atoms.value]))[0])
        rf = forcing(problem, atoms.point)
    return ResidualPieces(
        remainder=remainder,
        sampled_terms={i: atoms.second[i] for i in dims},
        forcing=rf,
    )


def residual_estimate(problem: PdeProblem, pieces: ResidualPieces, forward_dims) -> float:
    """A(x) + (N/|J|) * sum_{j in J} s_j - R(x); J may repeat with replacement."""
    dims = [int(i) for i in forward_dims]
    if not dims:
        raise ContractError("forward index set must be nonempty")
    if set(dims) != set(pieces.sampled_terms):
        raise ContractError("pieces were built from a different forward index set")
    total = sum(pieces.sampled_terms[j] for j in dims)
    return pieces.remainder + (problem.n_terms / len(dims)) * total - pieces.forcing


def residual_cotangents(
    problem: PdeProblem, atoms: net.AtomValues, backward_dims
) -> net.AtomCotangents:
    """Raw-atom chain-rule weights of d/dtheta [A + (N/|I|) sum_{i in I} s_i].

    Includes the wrapper product-rule coefficients and the remainder's
    derivative with respect to the wrapped value / gradient.
    """
    dims = [int(i) for i in backward_dims]
    if not dims:
        raise ContractError("backward index set must be nonempty")
    missing = [i for i in set(dims) if i not in atoms.second]
    if missing:
        raise ContractError(f"atoms missing second derivatives for dims {missing}")
    x = atoms.point[None, :]
    scale = problem.n_terms / len(dims)
    fac = float(wrapper_factor(problem, x)[0])
    a = 0.0
    b: dict[int, float] = {}
    c: dict[int, float] = {}
    for i in set(dims):
        mult = scale * dims.count(i)
        if problem.is_elliptic:
            a += mult * -2.0
            b[i] = b.get(i, 0.0) + mult * -4.0 * atoms.point[i]
            c[i] = c.get(i, 0.0) + mult * fac
        else:
            c[i] = c.get(i, 0.0) + mult * fac
    if problem.is_hjb:
        fdims = list(range(problem.d + 1))
        wfa = np.array([[atoms.first[i] for i in fdims]])
        ra, rb = remainder_cotangents_batch(
            problem, x, np.array([atoms.value]), wfa, fdims
        )
    else:
        fdims = sorted(atoms.first)
        ra, rb = remainder_cotangents_batch(
            problem, x, np.array([atoms.value]), None, fdims
        )
    a += float(ra[0])
    for k, i in enumerate(fdims):
        if rb[0, k] != 0.0:
            b[i] = b.get(i, 0.0) + float(rb[0, k])
    return net.AtomCotangents(a=a, b=b, c=c)
