"""End-to-end training loop, evaluation, metrics emission, checkpointing.

The loop draws fresh residual points and dimension batches every epoch from
counter-based streams, so two runs with identical seeds produce identical
loss and error streams (only the timing columns differ).  The loss is
normalized by 1/(N_r * n_terms^2); with the default base learning rate 1e-3
this pairing mirrors the reference training protocol.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from . import pde
from .errors import (
    CheckpointError,
    ConfigurationError,
    DivergenceError,
    UndefinedMetricError,
)
from .estimator import (
    accumulate,
    full_grad,
    grad_algo1,
    grad_algo2,
    grad_algo3,
    residual_values,
)
from .optimizer import AdamState, LrSchedule, adam_step, adversarial_ascend, init_adam, lr_at
from .sampling import RngStream, TestSet, make_test_set, sample_dims, sample_hjb_points, sample_unit_ball

__all__ = [
    "TrainConfig",
    "EvalRecord",
    "RunReport",
    "train",
    "evaluate",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "emit_metrics",
    "METRIC_COLUMNS",
]

ALGORITHMS = ("full", "algo1", "algo2", "algo3")
METRIC_COLUMNS = ("epoch", "loss", "rel_l2", "wall_s", "step_s", "term_evals")


@dataclass(frozen=True)
class TrainConfig:
    """Every field has a documented default; see README for the full table."""

    problem: str = "poisson"
    dim: int = 100
    model_seed: int = 0
    problem_seed: int = 0
    data_seed: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "tanh"
    bias: bool = True
    algorithm: str = "algo3"
    batch_points: int = 100
    dims_backward: int = 100
    dims_forward: int = 100
    replacement: bool = False
    epochs: int = 10000
    lr: float = 1e-3
    schedule: str = "linear_to_zero"
    lr_decay: float = 0.9995
    accumulation: int = 1
    adversarial: bool = False
    adv_steps: int = 1
    adv_dims: int = 10
    adv_step_ratio: float = 1e-2
    test_points: int = 20000
    test_mc_samples: int = 100000
    eval_interval: int = 100
    workers: int = 0  # 0 = one worker per accumulation draw, capped at cores

    def __post_init__(self):
        if self.problem not in pde.KINDS:
            raise ConfigurationError(f"unknown problem {self.problem!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.dim < 2:
            raise ConfigurationError("dim must be at least 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ConfigurationError("need at least one hidden layer")
        for name in ("batch_points", "epochs", "accumulation", "test_points",
                     "eval_interval", "adv_steps"):
            if getattr(self, name) < (0 if name in ("epochs", "adv_steps") else 1):
                raise ConfigurationError(f"{name} must be positive")
        if not self.replacement and self.algorithm != "full":
            if self.dims_backward > self.dim:
                raise ConfigurationError("dims_backward exceeds dim without replacement")
            if self.algorithm == "algo2" and self.dims_forward > self.dim:
                raise ConfigurationError("dims_forward exceeds dim without replacement")

    @property
    def widths(self) -> tuple[int, ...]:
        d_in = self.dim + 1 if self.problem in pde.HJB_KINDS else self.dim
        return (d_in, *self.hidden, 1)


@dataclass(frozen=True)
class EvalRecord:
    epoch: int
    loss: float
    rel_l2: float
    wall_s: float
    step_s: float
    term_evals: int


@dataclass
class RunReport:
    config: TrainConfig
    records: list[EvalRecord] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    params: net.NetworkParams | None = None
    state: AdamState | None = None


def predict(params: net.NetworkParams, problem: pde.PdeProblem, points: np.ndarray) -> np.ndarray:
    """Wrapped-model predictions on a batch of points."""
    x = np.asarray(points, dtype=np.float64)
    return pde.wrapped_value_batch(problem, x, net.forward_many(params, x))


def evaluate(params: net.NetworkParams, problem: pde.PdeProblem, test_set: TestSet) -> float:
    """Relative L2 error of the wrapped model against the reference values."""
    if test_set.points.shape[0] < 1:
        raise ConfigurationError("empty test set")
    truth_norm = np.linalg.norm(test_set.values)
    if truth_norm == 0.0:
        raise UndefinedMetricError("reference values are identically zero")
    pred = predict(params, problem, test_set.points)
    return float(np.linalg.norm(pred - test_set.values) / truth_norm)


def _sample_points(problem: pde.PdeProblem, n: int, stream: RngStream) -> np.ndarray:
    if problem.is_elliptic:
        return sample_unit_ball(problem.d, n, stream)
    return sample_hjb_points(problem.d, n, stream)


def _normalized_loss(problem, params, points) -> float:
    """Exact normalized loss on a point batch (all dimensions forward)."""
    r = residual_values(problem, params, points, np.arange(problem.n_terms))
    n = problem.n_terms
    return float((r @ r) / (2.0 * points.shape[0] * n * n))


def _one_estimate(problem, params, cfg: TrainConfig, points, epoch: int, draw: int):
    if cfg.algorithm == "full":
        return full_grad(problem, params, points)
    stream_i = RngStream(cfg.data_seed, epoch, "dims_backward", draw)
    dims_i = sample_dims(problem.n_terms, cfg.dims_backward, cfg.replacement, stream_i)
    if cfg.algorithm == "algo1":
        return grad_algo1(problem, params, points, dims_i)
    if cfg.algorithm == "algo3":
        return grad_algo3(problem, params, points, dims_i)
    stream_j = RngStream(cfg.data_seed, epoch, "dims_forward", draw)
    dims_j = sample_dims(problem.n_terms, cfg.dims_forward, cfg.replacement, stream_j)
    return grad_algo2(problem, params, points, dims_i, dims_j)


def train(config: TrainConfig) -> RunReport:
    """Run the configured training loop; deterministic given the seeds."""
    problem = pde.make_problem(config.problem, config.dim, config.problem_seed)
    params = net.init_params(
        config.widths, config.activation, config.model_seed, config.bias
    )
    state = init_adam(params)
    schedule = LrSchedule(config.schedule, config.lr, max(config.epochs, 1), config.lr_decay)
    test_set = make_test_set(
        problem, config.test_points, config.data_seed, config.test_mc_samples
    )
    report = RunReport(config=config)
    t_start = time.perf_counter()
    cum_terms = 0
    pool = None
    if config.accumulation > 1:
        n_workers = config.workers or min(config.accumulation, os.cpu_count() or 1)
        if n_workers > 1:
            pool = ThreadPoolExecutor(max_workers=n_workers)

    def record(epoch: int, points, step_s: float):
        loss = _normalized_loss(problem, params, points)
        rel = evaluate(params, problem, test_set)
        report.records.append(
            EvalRecord(
                epoch=epoch,
                loss=loss,
                rel_l2=rel,
                wall_s=time.perf_counter() - t_start,
                step_s=step_s,
                term_evals=cum_terms,
            )
        )
        if not np.isfinite(loss):
            report.final = {"status": "diverged", "epoch": epoch}
            raise DivergenceError(f"non-finite loss at epoch {epoch}", report)

    try:
        init_points = _sample_points(
            problem, config.batch_points, RngStream(config.data_seed, 0, "points")
        )
        record(0, init_points, 0.0)
        last_record_t = time.perf_counter()
        steps_since = 0
        for epoch in range(config.epochs):
            points = _sample_points(
                problem, config.batch_points, RngStream(config.data_seed, epoch, "points")
            )
            if config.adversarial and problem.is_hjb and config.adv_steps > 0:
                adv_stream = RngStream(config.data_seed, epoch, "adversarial")
                adv_dims = sample_dims(
                    problem.n_terms,
                    min(config.adv_dims, problem.n_terms),
                    False,
                    adv_stream.child(purpose="adversarial_dims"),
                )
                points = adversarial_ascend(
                    problem,
                    params,
                    points,
                    adv_dims,
                    config.adv_steps,
                    config.adv_step_ratio * lr_at(schedule, epoch),
                    adv_stream,
                )
            if pool is not None:
                draws = list(
                    pool.map(
                        lambda k: _one_estimate(problem, params, config, points, epoch, k),
                        range(config.accumulation),
                    )
                )
            else:
                draws = [
                    _one_estimate(problem, params, config, points, epoch, k)
                    for k in range(config.accumulation)
                ]
            estimate = draws[0] if len(draws) == 1 else accumulate(draws)
            cum_terms += estimate.meta["term_evals"]
            if not np.all(np.isfinite(estimate.grad.data)):
                report.final = {"status": "diverged", "epoch": epoch + 1}
                raise DivergenceError(f"non-finite gradient at epoch {epoch}", report)
            params, state = adam_step(state, params, estimate.grad, lr_at(schedule, epoch))
            steps_since += 1
            done = epoch + 1 == config.epochs
            if done or (epoch + 1) % config.eval_interval == 0:
                now = time.perf_counter()
                record(epoch + 1, points, (now - last_record_t) / max(steps_since, 1))
                last_record_t = now
                steps_since = 0
    finally:
        if pool is not None:
            pool.shutdown()
        report.params = params
        report.state = state
    report.final = {
        "status": "completed",
        "epochs": config.epochs,
        "rel_l2": report.records[-1].rel_l2,
        "loss": report.records[-1].loss,
        "wall_s": time.perf_counter() - t_start,
        "term_evals": cum_terms,
    }
    return report


_CKPT_MAGIC = b"SDGDCKPT"
_CKPT_VERSION = 1


def save_checkpoint(params: net.NetworkParams, state: AdamState | None, path: str) -> None:
    """Binary checkpoint: JSON header, then float64 little-endian arrays.

    Layout after the header: parameters in canonical order, then the Adam
    first and second moment vectors when an optimizer state is included.
    Written atomically (temp file + rename).
    """
    header = {
        "version": _CKPT_VERSION,
        "widths": list(params.widths),
        "activation": params.activation,
        "bias": params.biases is not None,
        "has_adam": state is not None,
    }
    if state is not None:
        header["adam"] = {
            "step": state.step,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
        }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = [
        _CKPT_MAGIC,
        struct.pack("<I", len(hdr)),
        hdr,
        flatten_le(net.flatten_params(params)),
    ]
    if state is not None:
        payload.append(flatten_le(state.m))
        payload.append(flatten_le(state.v))
    _atomic_write_bytes(path, b"".join(payload))


def flatten_le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def load_checkpoint(path: str):
    """Load (params, state) from a checkpoint; never returns partial state."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(blob) < len(_CKPT_MAGIC) + 4 or blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    ofs = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, ofs)
    ofs += 4
    if len(blob) < ofs + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[ofs : ofs + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    ofs += hlen
    if header.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    widths = tuple(int(w) for w in header["widths"])
    template = net.init_params(widths, header["activation"], 0, header["bias"])
    n = net.param_count(template)
    vectors = 1 + (2 if header["has_adam"] else 0)
    need = n * 8 * vectors
    if len(blob) - ofs != need:
        raise CheckpointError(
            f"truncated checkpoint payload: {len(blob) - ofs} bytes, expected {need}"
        )
    flat = np.frombuffer(blob, dtype="<f8", count=n, offset=ofs).copy()
    ofs += n * 8
    params = net.replace_params(template, flat)
    state = None
    if header["has_adam"]:
        m = np.frombuffer(blob, dtype="<f8", count=n, offset=ofs).copy()
        ofs += n * 8
        v = np.frombuffer(blob, dtype="<f8", count=n, offset=ofs).copy()
        a = header["adam"]
        state = AdamState(m, v, int(a["step"]), a["beta1"], a["beta2"], a["eps"])
    return params, state


def emit_metrics(report: RunReport, path: str) -> None:
    """One delimited row per evaluation: epoch,loss,rel_l2,wall_s,step_s,term_evals."""
    lines = [",".join(METRIC_COLUMNS)]
    for r in report.records:
        lines.append(
            f"{r.epoch},{r.loss!r},{r.rel_l2!r},{r.wall_s:.6f},{r.step_s:.6f},{r.term_evals}"
        )
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_to_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["hidden"] = list(config.hidden)
    return d
