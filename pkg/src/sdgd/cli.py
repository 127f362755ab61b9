"""Command-line entry point.

Subcommands: train, eval, verify, sweep, hjb-ref.  Configuration is a flat
JSON object whose keys are TrainConfig fields; unknown keys are rejected and
every field has a documented default.  ``--set key=value`` overrides
individual fields.  All outputs land under the output directory (``--out``,
overridden by the SDGD_OUT_DIR environment variable) and are written
atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import analysis
from . import network as net
from . import pde
from .errors import ConfigurationError
from .estimator import accumulate, full_grad, grad_algo1, grad_algo2, grad_algo3
from .sampling import RngStream, make_test_set, sample_unit_ball
from .trainer import (
    TrainConfig,
    config_to_dict,
    emit_metrics,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    _atomic_write_bytes,
)

__all__ = ["parse_config", "dispatch", "main"]

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, value):
    """Coerce a JSON value (or string override) to the config field's type."""
    default = getattr(TrainConfig(), key)
    if key == "hidden":
        if isinstance(value, str):
            value = json.loads(value)
        return tuple(int(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigurationError(f"config key {key!r}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or (isinstance(value, float) and not float(value).is_integer()):
            raise ConfigurationError(f"config key {key!r}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def parse_config(path: str | None, overrides=()) -> TrainConfig:
    """Strict config parse: unknown keys error, missing keys take defaults."""
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except ValueError as exc:
                raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        try:
            raw[key] = json.loads(value)
        except ValueError:
            raw[key] = value
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in raw.items()}
    return TrainConfig(**kwargs)


def _out_dir(args) -> str:
    out = os.environ.get("SDGD_OUT_DIR") or args.out
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, payload: dict) -> None:
    _atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def _cmd_train(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    out = _out_dir(args)
    report = train(cfg)
    emit_metrics(report, os.path.join(out, "metrics.csv"))
    save_checkpoint(report.params, report.state, os.path.join(out, "checkpoint.bin"))
    _write_json(
        os.path.join(out, "summary.json"),
        {"config": config_to_dict(cfg), "final": report.final},
    )
    print(f"final rel_l2 {report.final['rel_l2']:.6e}  loss {report.final['loss']:.6e}")
    return 0


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    out = _out_dir(args)
    params, _ = load_checkpoint(args.checkpoint)
    problem = pde.make_problem(cfg.problem, cfg.dim, cfg.problem_seed)
    test_set = make_test_set(problem, cfg.test_points, cfg.data_seed, cfg.test_mc_samples)
    rel = evaluate(params, problem, test_set)
    _write_json(os.path.join(out, "eval.json"), {"rel_l2": rel, "test_points": cfg.test_points})
    print(f"rel_l2 {rel:.6e}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    out = _out_dir(args)
    grid = []
    for cell in args.grid.split(","):
        ni, _, nb = cell.partition(":")
        grid.append((int(ni), int(nb)))
    rows = analysis.batch_sweep(cfg, grid)
    header = "dims_backward,batch_points,rel_l2,s_per_it,total_s,term_evals,s_per_term"
    lines = [header] + [
        f"{r['dims_backward']},{r['batch_points']},{r['rel_l2']!r},"
        f"{r['s_per_it']:.6f},{r['total_s']:.6f},{r['term_evals']},{r['s_per_term']:.9f}"
        for r in rows
    ]
    _atomic_write_bytes(os.path.join(out, "sweep.csv"), ("\n".join(lines) + "\n").encode())
    for line in lines:
        print(line)
    return 0


def _cmd_hjb_ref(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    if cfg.problem not in pde.HJB_KINDS:
        raise ConfigurationError("hjb-ref needs an HJB problem kind")
    out = _out_dir(args)
    problem = pde.make_problem(cfg.problem, cfg.dim, cfg.problem_seed)
    ts = make_test_set(problem, cfg.test_points, cfg.data_seed, cfg.test_mc_samples)
    cols = [f"x{i}" for i in range(problem.d)] + ["t", "value"]
    lines = [",".join(cols)]
    for row, val in zip(ts.points, ts.values):
        lines.append(",".join(repr(float(v)) for v in row) + f",{float(val)!r}")
    _atomic_write_bytes(os.path.join(out, "hjb_ref.csv"), ("\n".join(lines) + "\n").encode())
    print(f"wrote {len(ts.values)} reference values")
    return 0


def _verify_checks():
    """The shipped-fixture property suite behind ``sdgd verify``."""
    checks = []
    rng = np.random.default_rng(0)

    def perturbed(widths, seed, activation="tanh", bias=True):
        p = net.init_params(widths, activation, seed, bias)
        flat = net.flatten_params(p)
        jitter = np.random.default_rng(seed + 1).standard_normal(flat.size) * 0.05
        return net.replace_params(p, flat + jitter)

    # finite-difference agreement
    for act in ("tanh", "sin"):
        p = perturbed([5, 9, 8, 1], 3, act)
        report = analysis.fd_check(p, rng.uniform(-0.5, 0.5, 5), range(5))
        checks.append((f"fd_{act}", max(report.values()) <= 1e-5,
                       f"max rel err {max(report.values()):.2e}"))

    # unbiasedness enumerations
    prob6 = pde.make_problem("sine_gordon", 6, 1)
    p6 = perturbed([6, 8, 1], 5)
    pts6 = sample_unit_ball(6, 3, RngStream(11)) * 0.8
    dev1 = analysis.unbiasedness_check(prob6, p6, pts6, 2, "algo1")
    checks.append(("unbiased_algo1_d6_k2", dev1 <= 1e-10, f"max rel dev {dev1:.2e}"))
    prob4 = pde.make_problem("allen_cahn", 4, 2)
    p4 = perturbed([4, 7, 1], 6)
    pts4 = sample_unit_ball(4, 3, RngStream(12)) * 0.8
    dev2 = analysis.unbiasedness_check(prob4, p4, pts4, 1, "algo2")
    checks.append(("unbiased_algo2_d4_k1", dev2 <= 1e-10, f"max rel dev {dev2:.2e}"))

    # reused-index estimator bias profile
    profile = analysis.bias_profile_algo3(prob4, p4, pts4, [1, 2, 3, 4])
    ks = sorted(profile)
    mono = all(profile[a] >= profile[b] - 1e-12 for a, b in zip(ks, ks[1:]))
    checks.append(
        (
            "algo3_bias_profile",
            profile[4] == 0.0 and profile[1] > 0.0 and mono,
            f"bias {', '.join(f'{k}:{profile[k]:.2e}' for k in ks)}",
        )
    )

    # variance law
    fit = analysis.variance_fit(
        prob4, p4, sample_unit_ball(4, 4, RngStream(13)) * 0.8,
        [(b, i) for b in (1, 2, 3) for i in (1, 2, 3)],
    )
    cells = {(b, i): v for b, i, v in fit.grid}
    mono_b = all(cells[(2, i)] <= cells[(1, i)] and cells[(3, i)] <= cells[(2, i)] for i in (1, 2, 3))
    mono_i = all(cells[(b, 2)] <= cells[(b, 1)] and cells[(b, 3)] <= cells[(b, 2)] for b in (1, 2, 3))
    by_fit, by_enum = analysis.budget_minimizers(fit, 3)
    checks.append(
        (
            "variance_law",
            fit.residual <= 1e-6 and mono_b and mono_i and by_fit == by_enum,
            f"fit residual {fit.residual:.2e}, minimizer {by_fit}",
        )
    )

    # derivative norm bounds
    ok = True
    worst = np.inf
    for trial in range(100):
        widths = [3, int(rng.integers(2, 6)), int(rng.integers(2, 6)), 1]
        p = net.init_params(widths, "sin", int(rng.integers(1 << 30)), bias=False)
        xx = rng.uniform(-1.0, 1.0, 3)
        for order in (1, 2):
            for chk in analysis.lemma_bound_check(p, xx, order):
                ok = ok and chk.margin >= 0.0
                worst = min(worst, chk.margin)
    checks.append(("derivative_bounds", ok, f"min margin {worst:.3e}"))

    # full-index endpoints and partition accumulation
    ref = full_grad(prob4, p4, pts4).grad.data
    same = (
        np.array_equal(grad_algo1(prob4, p4, pts4, range(4)).grad.data, ref)
        and np.array_equal(grad_algo2(prob4, p4, pts4, range(4), range(4)).grad.data, ref)
        and np.array_equal(grad_algo3(prob4, p4, pts4, range(4)).grad.data, ref)
    )
    acc = accumulate(
        [grad_algo1(prob4, p4, pts4, [0, 1]), grad_algo1(prob4, p4, pts4, [2, 3])]
    ).grad.data
    part = np.max(np.abs(acc - ref)) / np.max(np.abs(ref))
    checks.append(("full_index_endpoints", same, "bitwise at full index sets"))
    checks.append(("partition_accumulation", part <= 1e-12, f"rel dev {part:.2e}"))
    return checks


def _cmd_verify(args) -> int:
    checks = _verify_checks()
    lines = []
    failed = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        failed += 0 if ok else 1
        line = f"{status} {name}: {detail}"
        lines.append(line)
        print(line)
    out = _out_dir(args)
    _atomic_write_bytes(os.path.join(out, "verify.txt"), ("\n".join(lines) + "\n").encode())
    return 1 if failed else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdgd", description="Dimension-sampled PINN training and verification"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", default=None, help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config field")
        p.add_argument("--out", default="out", help="output directory")

    p_train = sub.add_parser("train", help="run a training loop")
    common(p_train)
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_verify = sub.add_parser("verify", help="run the theory property suite")
    common(p_verify, needs_config=False)
    p_sweep = sub.add_parser("sweep", help="batch-size sweep")
    common(p_sweep)
    p_sweep.add_argument("--grid", required=True, metavar="I:B,I:B,...")
    p_ref = sub.add_parser("hjb-ref", help="write HJB reference values")
    common(p_ref)
    return parser


def dispatch(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "verify": _cmd_verify,
        "sweep": _cmd_sweep,
        "hjb-ref": _cmd_hjb_ref,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:  # diagnostic exit, no partial outputs
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
