import numpy as np
import pytest

from sdgd import network as net
from sdgd import pde
from sdgd.sampling import RngStream, sample_hjb_points, sample_unit_ball


def perturbed_params(widths, seed, activation="tanh", bias=True, scale=0.05):
    """Xavier init plus a small jitter so biases and moments are nonzero."""
    p = net.init_params(widths, activation, seed, bias)
    flat = net.flatten_params(p)
    jitter = np.random.default_rng(seed + 1000).standard_normal(flat.size) * scale
    return net.replace_params(p, flat + jitter)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def elliptic_fixture():
    """Small nonlinear fixture: Sine-Gordon d=4, jittered 2-hidden-layer net."""
    problem = pde.make_problem("sine_gordon", 4, seed=2)
    params = perturbed_params([4, 8, 7, 1], seed=5)
    points = sample_unit_ball(4, 4, RngStream(31)) * 0.8
    return problem, params, points


@pytest.fixture(scope="session")
def hjb_fixture():
    problem = pde.make_problem("hjb_rosenbrock", 4, seed=3)
    params = perturbed_params([5, 8, 8, 1], seed=9)
    points = sample_hjb_points(4, 4, RngStream(32))
    return problem, params, points


def central_diff(f, x, i, h):
    e = np.zeros_like(x)
    e[i] = h
    return (f(x + e) - f(x - e)) / (2 * h)


def central_diff2(f, x, i, h):
    e = np.zeros_like(x)
    e[i] = h
    return (f(x + e) - 2 * f(x) + f(x - e)) / (h * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
