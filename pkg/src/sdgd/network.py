"""MLP surrogate with a layered analytic derivative engine.

The model is a composition of linear layers with an elementwise activation
between them (none after the last layer).  The engine evaluates, over shared
per-layer activations:

* the value ``u(x)``,
* first and second directional input derivatives (one forward sweep per
  requested direction, reusing the per-layer activation diagonals), and
* parameter gradients of linear combinations ``a*u + sum_k b_k * D1_k u +
  sum_k c_k * D2_k u`` via a single reverse sweep over the stored tapes.

All numerics are float64.  Coordinate dimensions are 0-based.  The canonical
flat parameter order is layer-major: ``W_1`` (row-major), ``b_1``, ``W_2``,
``b_2``, ... with bias vectors present only when the network has biases.

Everything here is pure: identical inputs produce bit-identical outputs, and
shared read-only ``NetworkParams`` may be used from many workers at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError

__all__ = [
    "NetworkParams",
    "AtomValues",
    "AtomCotangents",
    "ParamGrad",
    "init_params",
    "forward",
    "forward_many",
    "derivative_bundle",
    "param_pullback",
    "ForwardTape",
    "DirectionTape",
    "forward_tape",
    "tangent_sweep",
    "reverse_sweep",
    "coordinate_directions",
    "param_count",
    "flatten_params",
    "replace_params",
]


def _act_tables(activation: str):
    """Return (sigma, sigma', sigma'', sigma''') elementwise functions.

    Each derivative receives the pre-activation z and the cached sigma(z).
    """
    if activation == "tanh":

        def d1(z, s):
            return 1.0 - s * s

        def d2(z, s):
            return -2.0 * s * (1.0 - s * s)

        def d3(z, s):
            sp = 1.0 - s * s
            return -2.0 * sp * sp + 4.0 * s * s * sp

        return np.tanh, d1, d2, d3
    if activation == "sin":
        return (
            np.sin,
            lambda z, s: np.cos(z),
            lambda z, s: -np.sin(z),
            lambda z, s: -np.cos(z),
        )
    raise ConfigurationError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class NetworkParams:
    """Weights of the MLP surrogate.

    ``widths = [m_0, m_1, ..., m_L]`` with ``m_L == 1``.  ``weights[l]`` has
    shape ``(m_{l+1}, m_l)``; ``biases`` is either a matching list of vectors
    or ``None`` for the bias-free form.  Arrays are treated as read-only.
    """

    widths: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...] | None
    activation: str

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "weights", tuple(self.weights))
        if self.biases is not None:
            object.__setattr__(self, "biases", tuple(self.biases))
        if len(widths) < 2:
            raise ConfigurationError("need at least one layer (two widths)")
        if widths[-1] != 1:
            raise ConfigurationError("output width must be 1")
        if any(w < 1 for w in widths):
            raise ConfigurationError("all widths must be positive")
        if len(self.weights) != len(widths) - 1:
            raise ConfigurationError("weights count does not match widths")
        for l, w in enumerate(self.weights):
            if w.shape != (widths[l + 1], widths[l]):
                raise ConfigurationError(
                    f"layer {l}: weight shape {w.shape} != {(widths[l + 1], widths[l])}"
                )
            if not np.all(np.isfinite(w)):
                raise ConfigurationError(f"layer {l}: non-finite weight entries")
        if self.biases is not None:
            if len(self.biases) != len(self.weights):
                raise ConfigurationError("biases count does not match weights")
            for l, b in enumerate(self.biases):
                if b.shape != (widths[l + 1],):
                    raise ConfigurationError(f"layer {l}: bias shape {b.shape}")
                if not np.all(np.isfinite(b)):
                    raise ConfigurationError(f"layer {l}: non-finite bias entries")
        _act_tables(self.activation)

    @property
    def depth(self) -> int:
        """Number of linear layers L."""
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.widths[0]


@dataclass(frozen=True)
class AtomValues:
    """Value and per-dimension input derivatives of a model at one point.

    ``first`` holds du/dx_i for every requested first or second dimension;
    ``second`` holds d2u/dx_i^2 exactly for ``dims``.
    """

    point: np.ndarray
    dims: tuple[int, ...]
    value: float
    first: dict[int, float]
    second: dict[int, float]


@dataclass(frozen=True)
class AtomCotangents:
    """Chain-rule weights on the atoms entering one reverse pass."""

    a: float = 0.0
    b: dict[int, float] = field(default_factory=dict)
    c: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ParamGrad:
    """Flat gradient in the canonical parameter order."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 1:
            raise ShapeError("ParamGrad data must be 1-D")
        if not np.all(np.isfinite(data)):
            raise ContractError("ParamGrad has non-finite entries")


def init_params(
    widths, activation: str = "tanh", seed: int = 0, bias: bool = True
) -> NetworkParams:
    """Xavier-uniform weights (zero biases), deterministic in the seed."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ConfigurationError("need at least one layer (two widths)")
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    biases = tuple(np.zeros(w) for w in widths[1:]) if bias else None
    return NetworkParams(widths, tuple(weights), biases, activation)


def param_count(params: NetworkParams) -> int:
    n = sum(w.size for w in params.weights)
    if params.biases is not None:
        n += sum(b.size for b in params.biases)
    return n


def flatten_params(params: NetworkParams) -> np.ndarray:
    """Parameters in the canonical flat order."""
    parts = []
    for l, w in enumerate(params.weights):
        parts.append(w.ravel())
        if params.biases is not None:
            parts.append(params.biases[l])
    return np.concatenate(parts)


def replace_params(params: NetworkParams, flat: np.ndarray) -> NetworkParams:
    """Rebuild a NetworkParams from a canonical flat vector."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (param_count(params),):
        raise ShapeError(
            f"flat vector length {flat.shape} != parameter count {param_count(params)}"
        )
    weights, biases, ofs = [], [], 0
    for l, w in enumerate(params.weights):
        weights.append(flat[ofs : ofs + w.size].reshape(w.shape).copy())
        ofs += w.size
        if params.biases is not None:
            b = params.biases[l]
            biases.append(flat[ofs : ofs + b.size].copy())
            ofs += b.size
    return NetworkParams(
        params.widths,
        tuple(weights),
        tuple(biases) if params.biases is not None else None,
        params.activation,
    )


@dataclass
class ForwardTape:
    """Shared per-layer state of one batched forward pass.

    ``hs[l]`` is the layer output for l = 0..L-1 (``hs[0]`` is the input),
    ``zs``/``s1``/``s2`` are the hidden pre-activations and the activation
    first/second derivative diagonals.  ``values`` is u(x), shape (B,).
    """

    params: NetworkParams
    hs: list[np.ndarray]
    zs: list[np.ndarray]
    s1: list[np.ndarray]
    s2: list[np.ndarray]
    values: np.ndarray


@dataclass
class DirectionTape:
    """Per-direction tangent state retained for the reverse sweep.

    For direction k without second-order tangents (``second_mask[k]`` false)
    the ``sig``/``q`` slices are identically zero, which makes the reverse
    recursion degenerate to the pure first-order chain for that direction.
    """

    directions: np.ndarray  # (K, d_in)
    second_mask: np.ndarray  # (K,) bool
    tau: list[np.ndarray]  # (B, K, m_l) pre-activation first tangents
    sig: list[np.ndarray]  # (B, K, m_l) pre-activation second tangents
    p: list[np.ndarray]  # (B, K, m_l) post-activation first tangents
    q: list[np.ndarray]  # (B, K, m_l) post-activation second tangents


def forward_tape(params: NetworkParams, x: np.ndarray) -> ForwardTape:
    """Run the batched forward pass and keep the shared activation state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"expected points of shape (B, {params.d_in}), got {x.shape}")
    act, act1, act2, _ = _act_tables(params.activation)
    L = params.depth
    hs, zs, s1, s2 = [x], [], [], []
    h = x
    for l in range(L - 1):
        z = h @ params.weights[l].T
        if params.biases is not None:
            z = z + params.biases[l]
        h = act(z)
        zs.append(z)
        hs.append(h)
        s1.append(act1(z, h))
        s2.append(act2(z, h))
    out = h @ params.weights[L - 1].T
    if params.biases is not None:
        out = out + params.biases[L - 1]
    return ForwardTape(params, hs, zs, s1, s2, out[:, 0])


def coordinate_directions(d_in: int, dims) -> np.ndarray:
    """Unit coordinate directions for a sequence of 0-based dimensions."""
    dims = [int(i) for i in dims]
    for i in dims:
        if not 0 <= i < d_in:
            raise IndexError(f"dimension {i} out of range for input size {d_in}")
    v = np.zeros((len(dims), d_in))
    if dims:
        v[np.arange(len(dims)), dims] = 1.0
    return v


def tangent_sweep(
    tape: ForwardTape,
    directions: np.ndarray,
    second=True,
    keep: bool = False,
):
    """Propagate first (and second) directional tangents through the net.

    One sweep per direction row, all sharing the tape's activation diagonals.
    ``second`` is a bool or a per-direction mask; unmasked directions get a
    zero in the second-derivative output (and zero second-order tape slices).
    Returns ``(first, second, dir_tape)`` with (B, K) arrays; ``dir_tape`` is
    None unless ``keep``.
    """
    params = tape.params
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if directions.shape[1] != params.d_in:
        raise ShapeError(f"directions must have {params.d_in} columns")
    L = params.depth
    B = tape.hs[0].shape[0]
    K = directions.shape[0]
    mask = np.broadcast_to(np.asarray(second, dtype=bool), (K,))
    first = np.empty((B, K))
    second_out = np.zeros((B, K))

    if L == 1:
        # Single linear layer: D1_k u = W_1 v_k, second derivatives vanish.
        first[:] = (directions @ params.weights[0].T).T
        return first, second_out, None

    hidden = params.widths[1:-1]
    if keep:
        taus = [np.empty((B, K, m)) for m in hidden]
        sigs = [np.zeros((B, K, m)) for m in hidden]
        ps = [np.empty((B, K, m)) for m in hidden]
        qs = [np.zeros((B, K, m)) for m in hidden]
    w_out = params.weights[L - 1][0]
    for k in range(K):
        want2 = bool(mask[k])
        tau = np.broadcast_to(
            directions[k] @ params.weights[0].T, (B, params.widths[1])
        )
        p = tape.s1[0] * tau
        q = tape.s2[0] * tau * tau if want2 else None
        if keep:
            taus[0][:, k, :] = tau
            ps[0][:, k, :] = p
            if want2:
                qs[0][:, k, :] = q
        for l in range(1, L - 1):
            tau = p @ params.weights[l].T
            p = tape.s1[l] * tau
            if want2:
                sig = q @ params.weights[l].T
                q = tape.s2[l] * tau * tau + tape.s1[l] * sig
            if keep:
                taus[l][:, k, :] = tau
                ps[l][:, k, :] = p
                if want2:
                    sigs[l][:, k, :] = sig
                    qs[l][:, k, :] = q
        first[:, k] = p @ w_out
        if want2:
            second_out[:, k] = q @ w_out
    dir_tape = (
        DirectionTape(directions, np.array(mask), taus, sigs, ps, qs) if keep else None
    )
    return first, second_out, dir_tape


def reverse_sweep(
    tape: ForwardTape,
    dir_tape: DirectionTape | None,
    a: np.ndarray,
    b: np.ndarray | None = None,
    c: np.ndarray | None = None,
) -> np.ndarray:
    """Batch-summed parameter gradient of a*u + sum_k b_k*D1_k u + c_k*D2_k u.

    ``a`` has shape (B,); ``b`` and ``c`` have shape (B, K) matching the
    directions of ``dir_tape``.  Directions whose tape lacks second-order
    state must have zero ``c``.  Returns the flat gradient, summed over the
    batch in ascending point order.
    """
    params = tape.params
    L = params.depth
    B = tape.hs[0].shape[0]
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (B,):
        raise ShapeError("a must have shape (B,)")
    K = 0 if dir_tape is None else dir_tape.directions.shape[0]
    if K:
        b = np.zeros((B, K)) if b is None else np.asarray(b, dtype=np.float64)
        c = np.zeros((B, K)) if c is None else np.asarray(c, dtype=np.float64)
        if b.shape != (B, K) or c.shape != (B, K):
            raise ShapeError("cotangent arrays must have shape (B, K)")
        if np.any(np.abs(c[:, ~dir_tape.second_mask]) > 0):
            raise ContractError("second-derivative cotangent on a first-only tape")
    _, _, _, act3 = _act_tables(params.activation)

    gw = [np.zeros_like(w) for w in params.weights]
    gb = (
        [np.zeros(w.shape[0]) for w in params.weights]
        if params.biases is not None
        else None
    )
    w_out = params.weights[L - 1]  # (1, m_{L-1})

    if L == 1:
        # u = W_1 x (+ b): only the value atom depends on the parameters
        # nonlinearly in x; first-derivative atoms pull back one-hot onto W_1
        # and second-derivative atoms vanish identically.
        gw[0] += np.einsum("b,bj->j", a, tape.hs[0])[None, :]
        if dir_tape is not None:
            gw[0] += (b.sum(axis=0)[None, :] @ dir_tape.directions)
        if gb is not None:
            gb[0][0] += a.sum()
        return _pack(params, gw, gb)

    hbar = a[:, None] * w_out  # adjoint of hs[L-1]
    gw[L - 1] += np.einsum("b,bj->j", a, tape.hs[L - 1])[None, :]
    if gb is not None:
        gb[L - 1][0] += a.sum()
    if K:
        pbar = np.empty((B, K, params.widths[L - 1]))
        qbar = np.empty((B, K, params.widths[L - 1]))
        for k in range(K):
            pbar[:, k, :] = b[:, k, None] * w_out
            qbar[:, k, :] = c[:, k, None] * w_out
            gw[L - 1][0] += b[:, k] @ dir_tape.p[L - 2][:, k, :]
            gw[L - 1][0] += c[:, k] @ dir_tape.q[L - 2][:, k, :]
    else:
        pbar = qbar = None

    for l in range(L - 2, -1, -1):
        zbar = tape.s1[l] * hbar
        if K:
            taubar = np.empty_like(pbar)
            sigbar = np.empty_like(qbar)
            s3 = act3(tape.zs[l], tape.hs[l + 1])
            for k in range(K):
                tau = dir_tape.tau[l][:, k, :]
                pb = pbar[:, k, :]
                qb = qbar[:, k, :]
                taubar[:, k, :] = tape.s1[l] * pb + 2.0 * tape.s2[l] * tau * qb
                sigbar[:, k, :] = tape.s1[l] * qb
                zbar = zbar + tape.s2[l] * tau * pb + (
                    s3 * tau * tau + tape.s2[l] * dir_tape.sig[l][:, k, :]
                ) * qb
        gw[l] += np.einsum("bi,bj->ij", zbar, tape.hs[l])
        if gb is not None:
            gb[l] += zbar.sum(axis=0)
        if K:
            if l >= 1:
                for k in range(K):
                    gw[l] += np.einsum(
                        "bi,bj->ij", taubar[:, k, :], dir_tape.p[l - 1][:, k, :]
                    )
                    gw[l] += np.einsum(
                        "bi,bj->ij", sigbar[:, k, :], dir_tape.q[l - 1][:, k, :]
                    )
            else:
                for k in range(K):
                    gw[0] += np.outer(
                        taubar[:, k, :].sum(axis=0), dir_tape.directions[k]
                    )
                # sig_1 is identically zero: no W_1 pullback through sigbar
        if l >= 1:
            hbar = zbar @ params.weights[l]
            new_pbar = np.empty((B, K, params.widths[l])) if K else None
            new_qbar = np.empty((B, K, params.widths[l])) if K else None
            for k in range(K):
                new_pbar[:, k, :] = taubar[:, k, :] @ params.weights[l]
                new_qbar[:, k, :] = sigbar[:, k, :] @ params.weights[l]
            pbar, qbar = new_pbar, new_qbar
    return _pack(params, gw, gb)


def _pack(params: NetworkParams, gw, gb) -> np.ndarray:
    parts = []
    for l in range(params.depth):
        parts.append(gw[l].ravel())
        if gb is not None:
            parts.append(gb[l])
    return np.concatenate(parts)


def forward(params: NetworkParams, x: np.ndarray) -> float:
    """Evaluate u(x) at a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ShapeError(f"expected point of shape ({params.d_in},), got {x.shape}")
    return float(forward_tape(params, x[None, :]).values[0])


def forward_many(params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Evaluate u on a (B, d_in) batch of points."""
    return forward_tape(params, np.asarray(x, dtype=np.float64)).values.copy()


def derivative_bundle(
    params: NetworkParams, x: np.ndarray, second_dims, first_dims=()
) -> AtomValues:
    """Exact value plus per-dimension first/second derivatives at one point.

    Second derivatives are produced for ``second_dims``; first derivatives
    for ``first_dims | second_dims``.  Per-layer activations and their
    derivative diagonals are computed once and shared by every dimension.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ShapeError(f"expected point of shape ({params.d_in},), got {x.shape}")
    sdims = sorted(int(i) for i in set(second_dims))
    fonly = sorted(int(i) for i in set(int(j) for j in first_dims) - set(sdims))
    tape = forward_tape(params, x[None, :])
    first: dict[int, float] = {}
    second: dict[int, float] = {}
    if sdims:
        f, s, _ = tangent_sweep(tape, coordinate_directions(params.d_in, sdims))
        for j, i in enumerate(sdims):
            first[i] = float(f[0, j])
            second[i] = float(s[0, j])
    if fonly:
        f, _, _ = tangent_sweep(
            tape, coordinate_directions(params.d_in, fonly), second=False
        )
        for j, i in enumerate(fonly):
            first[i] = float(f[0, j])
    out = AtomValues(
        point=x.copy(),
        dims=tuple(sdims),
        value=float(tape.values[0]),
        first=first,
        second=second,
    )
    vals = list(first.values()) + list(second.values()) + [out.value]
    if not np.all(np.isfinite(vals)):
        raise ContractError("non-finite derivative atoms")
    return out


def param_pullback(
    params: NetworkParams, x: np.ndarray, cot: AtomCotangents
) -> ParamGrad:
    """Parameter gradient of a*u + sum_i b_i*du/dx_i + sum_i c_i*d2u/dx_i^2.

    One reverse traversal; the tape covers only the requested atoms.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.d_in,):
        raise ShapeError(f"expected point of shape ({params.d_in},), got {x.shape}")
    dims = sorted(set(int(i) for i in cot.b) | set(int(i) for i in cot.c))
    for i in dims:
        if not 0 <= i < params.d_in:
            raise IndexError(f"cotangent dimension {i} out of range")
    tape = forward_tape(params, x[None, :])
    if dims:
        mask = np.array([i in cot.c for i in dims])
        _, _, dir_tape = tangent_sweep(
            tape, coordinate_directions(params.d_in, dims), second=mask, keep=True
        )
        b = np.array([[float(cot.b.get(i, 0.0)) for i in dims]])
        c = np.array([[float(cot.c.get(i, 0.0)) for i in dims]])
    else:
        dir_tape, b, c = None, None, None
    if dims and params.depth == 1:
        # Linear net: handled by the reverse sweep's one-hot path; second
        # derivatives contribute nothing.
        dir_tape = DirectionTape(
            coordinate_directions(params.d_in, dims),
            np.ones(len(dims), dtype=bool),
            [], [], [], [],
        )
    flat = reverse_sweep(tape, dir_tape, np.array([float(cot.a)]), b, c)
    return ParamGrad(flat)
