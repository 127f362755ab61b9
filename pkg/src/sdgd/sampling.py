"""Deterministic, splittable random sampling of points and dimension sets.

Streams are value-like keys ``(seed, epoch, purpose, counter)``: every draw
function materializes a fresh generator from the key, so identical keys give
identical draws, distinct purpose tags give statistically independent
sequences, and interleaving draws from different streams cannot perturb
either one.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "RngStream",
    "IndexBatch",
    "TestSet",
    "sample_unit_ball",
    "sample_hjb_points",
    "sample_dims",
    "make_test_set",
]


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream key; cheap to copy and derive."""

    seed: int
    epoch: int = 0
    purpose: str = ""
    counter: int = 0

    def generator(self) -> np.random.Generator:
        tag = zlib.crc32(self.purpose.encode("utf-8"))
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(int(self.epoch), tag, int(self.counter)),
        )
        return np.random.default_rng(ss)

    def child(self, purpose: str | None = None, epoch: int | None = None,
              counter: int | None = None) -> "RngStream":
        """Derive a stream with selected key fields replaced."""
        kw = {}
        if purpose is not None:
            kw["purpose"] = purpose
        if epoch is not None:
            kw["epoch"] = epoch
        if counter is not None:
            kw["counter"] = counter
        return replace(self, **kw)


@dataclass(frozen=True)
class IndexBatch:
    """One epoch's sampled residual points and dimension index sets."""

    points: np.ndarray  # (B, d_in)
    backward: np.ndarray  # sorted dim indices I
    forward: np.ndarray | None  # sorted dim indices J, or None when unused
    replacement: bool

    def __post_init__(self):
        if self.backward.size < 1:
            raise ConfigurationError("backward index set must be nonempty")
        if not self.replacement:
            for name, arr in (("backward", self.backward), ("forward", self.forward)):
                if arr is not None and len(np.unique(arr)) != arr.size:
                    raise ConfigurationError(f"duplicate {name} indices without replacement")


def sample_unit_ball(d: int, n: int, stream: RngStream) -> np.ndarray:
    """n i.i.d. uniform points in the open unit ball of R^d.

    Gaussian direction times a U^(1/d)-distributed radius.
    """
    if d < 1 or n < 1:
        raise ConfigurationError("d and n must be positive")
    rng = stream.generator()
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    radii = rng.random(n) ** (1.0 / d)
    return g / norms * radii[:, None]


def sample_hjb_points(d: int, n: int, stream: RngStream) -> np.ndarray:
    """n points (x, t) with x ~ N(0, I_d) and t ~ Unif[0, 1].

    Returned as an (n, d+1) array with t in the trailing column.
    """
    if d < 1 or n < 1:
        raise ConfigurationError("d and n must be positive")
    rng = stream.generator()
    x = rng.standard_normal((n, d))
    t = rng.random(n)
    return np.concatenate([x, t[:, None]], axis=1)


def sample_dims(n_terms: int, k: int, replacement: bool, stream: RngStream) -> np.ndarray:
    """Sample k dimension indices from {0..n_terms-1}, sorted ascending.

    Without replacement: a uniform k-subset via a partial Fisher-Yates
    shuffle.  With replacement: k i.i.d. uniform draws (repeats kept).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not replacement and k > n_terms:
        raise ValueError(f"cannot draw {k} distinct indices from {n_terms}")
    rng = stream.generator()
    if replacement:
        return np.sort(rng.integers(0, n_terms, size=k))
    idx = np.arange(n_terms)
    for j in range(k):
        r = int(rng.integers(j, n_terms))
        idx[j], idx[r] = idx[r], idx[j]
    return np.sort(idx[:k])


@dataclass(frozen=True)
class TestSet:
    """Fixed evaluation points paired with reference values."""

    __test__ = False  # not a pytest class, despite the name

    points: np.ndarray  # (n, d_in)
    values: np.ndarray  # (n,)


def make_test_set(problem, n: int, seed: int, n_mc: int = 100_000) -> TestSet:
    """Fixed test points with reference solution values.

    Elliptic problems pair uniform unit-ball points with the closed-form
    exact solution; HJB problems pair (x, t) draws with Monte Carlo
    references at ``n_mc`` samples per point.
    """
    from . import pde  # local import to keep module layering acyclic

    if n < 1:
        raise ConfigurationError("test set size must be positive")
    stream = RngStream(seed, purpose="test_set")
    if problem.is_elliptic:
        points = sample_unit_ball(problem.d, n, stream)
        values = pde.exact_solution_many(problem, points)
    else:
        points = sample_hjb_points(problem.d, n, stream)
        ref_stream = RngStream(seed, purpose="test_ref")
        values = np.array(
            [
                pde.hjb_reference(
                    problem,
                    points[i, : problem.d],
                    points[i, problem.d],
                    n_mc,
                    ref_stream.child(counter=i),
                )
                for i in range(n)
            ]
        )
    return TestSet(points, values)
