import numpy as np
import pytest

from sdgd import network as net
from sdgd.errors import ConfigurationError, ContractError, ShapeError

from conftest import central_diff, central_diff2, perturbed_params, rel_err


class TestInitParams:
    def test_deterministic(self):
        a = net.init_params([3, 16, 1], seed=7)
        b = net.init_params([3, 16, 1], seed=7)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_single_width_list_rejected(self):
        with pytest.raises(ConfigurationError):
            net.init_params([2], seed=0)

    def test_output_width_must_be_one(self):
        with pytest.raises(ConfigurationError):
            net.NetworkParams((3, 4, 2), (np.zeros((4, 3)), np.zeros((2, 4))), None, "tanh")

    def test_xavier_uniform_bound(self):
        p = net.init_params([3, 16, 1], seed=0)
        for w, fan_in, fan_out in zip(p.weights, (3, 16), (16, 1)):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.all(np.abs(w) <= bound)
            # draws actually spread over the interval, not degenerate
            assert np.ptp(w) > bound

    def test_bias_flag(self):
        assert net.init_params([2, 4, 1], bias=False).biases is None
        p = net.init_params([2, 4, 1], bias=True)
        assert all(np.all(b == 0) for b in p.biases)

    def test_nonfinite_rejected(self):
        w = np.zeros((4, 3))
        w[0, 0] = np.nan
        with pytest.raises(ConfigurationError):
            net.NetworkParams((3, 4, 1), (w, np.zeros((1, 4))), None, "tanh")


class TestForward:
    def test_zero_weights_zero_output(self):
        for act in ("tanh", "sin"):
            p = net.NetworkParams(
                (3, 5, 1), (np.zeros((5, 3)), np.zeros((1, 5))), None, act
            )
            assert net.forward(p, np.ones(3)) == 0.0

    def test_pure_linear_map(self):
        p = net.NetworkParams((2, 1), (np.array([[2.0, -1.0]]),), None, "tanh")
        assert net.forward(p, np.array([3.0, 4.0])) == 2.0

    def test_matches_independent_reevaluation(self, rng):
        p = perturbed_params([3, 8, 1], seed=4)
        x = rng.uniform(-1, 1, 3)
        # plain loop re-evaluation, no shared code with the engine
        h = x.copy()
        h = np.tanh(p.weights[0] @ h + p.biases[0])
        expected = float((p.weights[1] @ h + p.biases[1])[0])
        assert rel_err(net.forward(p, x), expected) < 1e-14

    def test_shape_error(self):
        p = net.init_params([3, 4, 1], seed=0)
        with pytest.raises(ShapeError):
            net.forward(p, np.zeros(2))

    def test_forward_many_matches_forward(self, rng):
        # batch and single-point evaluation may differ in the last ulp
        # (different BLAS kernels); repeated same-shape calls are bitwise.
        p = perturbed_params([4, 6, 5, 1], seed=8)
        xs = rng.uniform(-1, 1, (7, 4))
        many = net.forward_many(p, xs)
        assert np.array_equal(many, net.forward_many(p, xs))
        for i in range(7):
            assert rel_err(many[i], net.forward(p, xs[i])) < 1e-14


class TestDerivativeBundle:
    def test_linear_net_derivatives(self):
        p = net.NetworkParams((3, 1), (np.array([[2.0, -1.0, 0.5]]),), None, "sin")
        b = net.derivative_bundle(p, np.array([0.1, 0.2, 0.3]), second_dims=[0, 1, 2])
        assert b.first == {0: 2.0, 1: -1.0, 2: 0.5}
        assert all(v == 0.0 for v in b.second.values())

    def test_one_hidden_unit_analytic(self):
        w1, w2, x = 0.73, -1.21, 0.37
        p = net.NetworkParams((1, 1, 1), (np.array([[w1]]), np.array([[w2]])), None, "tanh")
        b = net.derivative_bundle(p, np.array([x]), second_dims=[0])
        t = np.tanh(w1 * x)
        d2 = w2 * w1**2 * (-2.0 * t * (1.0 - t * t))
        assert rel_err(b.second[0], d2) < 1e-14

    @pytest.mark.parametrize("activation", ["tanh", "sin"])
    def test_finite_difference_agreement(self, activation, rng):
        # error measured relative to the derivative vector's scale, since the
        # FD truncation term is set by the function's higher derivatives, not
        # by the individual (possibly tiny) component being checked
        p = perturbed_params([4, 9, 8, 7, 1], seed=3, activation=activation)
        x = rng.uniform(-0.5, 0.5, 4)
        b = net.derivative_bundle(p, x, second_dims=range(4))
        f = lambda xx: net.forward(p, xx)
        fd1 = np.array([central_diff(f, x, i, 1e-3) for i in range(4)])
        fd2 = np.array([central_diff2(f, x, i, 1e-3) for i in range(4)])
        an1 = np.array([b.first[i] for i in range(4)])
        an2 = np.array([b.second[i] for i in range(4)])
        assert np.max(np.abs(an1 - fd1)) < 1e-6 * max(np.max(np.abs(an1)), 1e-8)
        assert np.max(np.abs(an2 - fd2)) < 1e-5 * max(np.max(np.abs(an2)), 1e-8)

    def test_out_of_range_dim(self):
        p = net.init_params([3, 4, 1], seed=0)
        with pytest.raises(IndexError):
            net.derivative_bundle(p, np.zeros(3), second_dims=[3])

    def test_subset_consistency_bitwise(self, rng):
        p = perturbed_params([5, 7, 6, 1], seed=6)
        x = rng.uniform(-1, 1, 5)
        small = net.derivative_bundle(p, x, second_dims=[1, 3])
        big = net.derivative_bundle(p, x, second_dims=[0, 1, 2, 3, 4])
        for i in (1, 3):
            assert small.first[i] == big.first[i]
            assert small.second[i] == big.second[i]

    def test_purity(self, rng):
        p = perturbed_params([3, 6, 1], seed=2)
        x = rng.uniform(-1, 1, 3)
        a = net.derivative_bundle(p, x, second_dims=[0, 2], first_dims=[1])
        b = net.derivative_bundle(p, x, second_dims=[0, 2], first_dims=[1])
        assert a.value == b.value and a.first == b.first and a.second == b.second

    def test_first_dims_superset(self):
        p = net.init_params([4, 5, 1], seed=1)
        b = net.derivative_bundle(p, np.zeros(4), second_dims=[1], first_dims=[0, 2])
        assert set(b.first) == {0, 1, 2}
        assert set(b.second) == {1}


class TestParamPullback:
    def test_zero_cotangents(self):
        p = net.init_params([3, 5, 1], seed=0)
        g = net.param_pullback(p, np.zeros(3), net.AtomCotangents())
        assert np.all(g.data == 0.0)
        assert g.data.size == net.param_count(p)

    def test_one_hidden_unit_value_grad(self):
        w1, w2, x = 0.6, 1.4, -0.3
        p = net.NetworkParams((1, 1, 1), (np.array([[w1]]), np.array([[w2]])), None, "tanh")
        g = net.param_pullback(p, np.array([x]), net.AtomCotangents(a=1.0))
        t = np.tanh(w1 * x)
        assert rel_err(g.data[0], w2 * (1 - t * t) * x) < 1e-14
        assert rel_err(g.data[1], t) < 1e-14

    @pytest.mark.parametrize("activation", ["tanh", "sin"])
    @pytest.mark.parametrize("bias", [True, False])
    def test_finite_difference_in_theta(self, activation, bias, rng):
        p = perturbed_params([4, 7, 6, 1], seed=11, activation=activation, bias=bias)
        x = rng.uniform(-0.5, 0.5, 4)
        cot = net.AtomCotangents(a=0.7, b={0: 0.4, 2: -1.3}, c={1: 2.0, 3: -0.8})
        g = net.param_pullback(p, x, cot).data
        flat = net.flatten_params(p)

        def scalar(vec):
            pp = net.replace_params(p, vec)
            bb = net.derivative_bundle(pp, x, second_dims=[1, 3], first_dims=[0, 2])
            return (
                cot.a * bb.value
                + sum(v * bb.first[i] for i, v in cot.b.items())
                + sum(v * bb.second[i] for i, v in cot.c.items())
            )

        h = 1e-4
        for j in rng.choice(flat.size, size=15, replace=False):
            vec = flat.copy()
            vec[j] += h
            up = scalar(vec)
            vec[j] -= 2 * h
            dn = scalar(vec)
            assert rel_err(g[j], (up - dn) / (2 * h)) < 1e-5

    def test_second_derivative_cotangent_fd(self, rng):
        p = perturbed_params([3, 6, 5, 1], seed=13)
        x = rng.uniform(-0.5, 0.5, 3)
        g = net.param_pullback(p, x, net.AtomCotangents(c={0: 1.0})).data
        flat = net.flatten_params(p)
        h = 1e-4
        for j in rng.choice(flat.size, size=10, replace=False):
            vec = flat.copy()
            vec[j] += h
            up = net.derivative_bundle(net.replace_params(p, vec), x, [0]).second[0]
            vec[j] -= 2 * h
            dn = net.derivative_bundle(net.replace_params(p, vec), x, [0]).second[0]
            assert rel_err(g[j], (up - dn) / (2 * h)) < 1e-5

    def test_linearity(self, rng):
        p = perturbed_params([4, 6, 1], seed=14)
        x = rng.uniform(-1, 1, 4)
        c1 = net.AtomCotangents(a=0.3, b={1: 1.0}, c={0: -0.5, 2: 2.0})
        c2 = net.AtomCotangents(a=-1.1, b={0: 0.7, 2: 0.2}, c={1: 1.5})
        alpha, beta = 0.6, -1.7
        combo = net.AtomCotangents(
            a=alpha * c1.a + beta * c2.a,
            b={i: alpha * c1.b.get(i, 0) + beta * c2.b.get(i, 0) for i in (0, 1, 2)},
            c={i: alpha * c1.c.get(i, 0) + beta * c2.c.get(i, 0) for i in (0, 1, 2)},
        )
        g1 = net.param_pullback(p, x, c1).data
        g2 = net.param_pullback(p, x, c2).data
        gc = net.param_pullback(p, x, combo).data
        mix = alpha * g1 + beta * g2
        assert np.max(np.abs(gc - mix)) <= 1e-12 * max(np.max(np.abs(mix)), 1.0)

    def test_out_of_range_cotangent(self):
        p = net.init_params([3, 4, 1], seed=0)
        with pytest.raises(IndexError):
            net.param_pullback(p, np.zeros(3), net.AtomCotangents(b={5: 1.0}))


class TestParamLayout:
    def test_flatten_roundtrip(self):
        p = perturbed_params([3, 5, 4, 1], seed=21)
        q = net.replace_params(p, net.flatten_params(p))
        for wa, wb in zip(p.weights, q.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(p.biases, q.biases):
            assert np.array_equal(ba, bb)

    def test_canonical_order_layer_major(self):
        p = net.init_params([2, 3, 1], seed=0, bias=True)
        flat = net.flatten_params(p)
        assert np.array_equal(flat[:6], p.weights[0].ravel())
        assert np.array_equal(flat[6:9], p.biases[0])
        assert np.array_equal(flat[9:12], p.weights[1].ravel())

    def test_wrong_length_rejected(self):
        p = net.init_params([2, 3, 1], seed=0)
        with pytest.raises(ShapeError):
            net.replace_params(p, np.zeros(3))

    def test_param_grad_validation(self):
        with pytest.raises(ContractError):
            net.ParamGrad(np.array([1.0, np.inf]))
        with pytest.raises(ShapeError):
            net.ParamGrad(np.zeros((2, 2)))


class TestConcurrency:
    def test_concurrent_bundles_identical(self, rng):
        from concurrent.futures import ThreadPoolExecutor

        p = perturbed_params([4, 8, 1], seed=17)
        x = rng.uniform(-1, 1, 4)
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(
                pool.map(lambda _: net.derivative_bundle(p, x, [0, 1, 2, 3]), range(32))
            )
        ref = results[0]
        for r in results[1:]:
            assert r.value == ref.value and r.second == ref.second
