import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from insiderlab.calculus import (
    increment_sums,
    ito_integral,
    martingale_increment_test,
    orthogonality_report,
    quadratic_variation,
    stochastic_exponential,
)
from insiderlab.engine import ProcessTrack, build_grid, sample_brownian

finite = st.floats(-2.0, 2.0, allow_nan=False)


class TestItoIntegral:
    def test_left_endpoint_sum(self):
        H = np.array([[1.0, 2.0, 3.0]])
        Y = np.array([[0.0, 1.0, 3.0]])
        # 1*(1-0) + 2*(3-1); the last integrand value is never used
        np.testing.assert_array_equal(ito_integral(H, Y).values, [[0.0, 1.0, 5.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ito_integral(np.ones((1, 3)), np.ones((1, 4)))

    def test_ito_formula_for_w_dw(self):
        W = sample_brownian(build_grid(1.0, 512), 200, seed=2)["W"]
        lhs = ito_integral(W, W).values
        rhs = 0.5 * (W.values**2 - quadratic_variation(W).values)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestQuadraticVariation:
    def test_sum_of_squared_increments(self):
        np.testing.assert_allclose(quadratic_variation(np.array([[0.0, 1.0, -1.0]])).values, [[0.0, 1.0, 5.0]])

    def test_brownian_bracket_close_to_t(self):
        W = sample_brownian(build_grid(1.0, 4096), 50, seed=4)["W"]
        # sd of [W]_1 is sqrt(2 dt)
        assert np.all(np.abs(quadratic_variation(W).terminal() - 1.0) < 6 * math.sqrt(2 / 4096))


class TestStochasticExponential:
    def test_matches_product_formula(self):
        Y = np.array([[0.0, 0.3, 0.1, 0.5]])
        dy = np.diff(Y, axis=1)
        expected = np.concatenate([[1.0], np.exp(np.cumsum(dy - 0.5 * dy**2))])
        np.testing.assert_allclose(stochastic_exponential(Y).values[0], expected)

    def test_log_mode(self):
        Y = np.array([[0.0, 0.3, 0.1]])
        np.testing.assert_allclose(
            np.exp(stochastic_exponential(Y, log=True).values), stochastic_exponential(Y).values
        )

    def test_needs_zero_start(self):
        with pytest.raises(ValueError):
            stochastic_exponential(np.array([[1.0, 2.0]]))

    def test_mean_one_for_brownian(self):
        W = sample_brownian(build_grid(1.0, 256), 40000, seed=9)["W"]
        E = stochastic_exponential(ProcessTrack("sW", 0.5 * W.values)).terminal()
        assert abs(E.mean() - 1.0) < 3 * E.std(ddof=1) / math.sqrt(E.size)

    @given(arrays(float, (3, 6), elements=finite), arrays(float, (3, 6), elements=finite))
    def test_product_rule_with_cross_bracket(self, a, b):
        a[:, 0] = 0.0
        b[:, 0] = 0.0
        # log E(a) + log E(b) = log E(a + b) + [a, b] with realised brackets
        la = stochastic_exponential(a, log=True).values
        lb = stochastic_exponential(b, log=True).values
        lab = stochastic_exponential(a + b, log=True).values
        cross = np.concatenate([np.zeros((3, 1)), np.cumsum(np.diff(a, axis=1) * np.diff(b, axis=1), axis=1)], axis=1)
        np.testing.assert_allclose(la + lb, lab + cross, atol=1e-9)

    @given(arrays(float, (2, 5), elements=finite), st.floats(-3.0, 3.0))
    def test_positive_and_scaled_log(self, y, c):
        y[:, 0] = 0.0
        E = stochastic_exponential(c * y).values
        assert np.all(E > 0)
        dy = np.diff(y, axis=1)
        log_c = stochastic_exponential(c * y, log=True).values[:, -1]
        np.testing.assert_allclose(log_c, (c * dy - 0.5 * c * c * dy * dy).sum(axis=1), atol=1e-9)


class TestOrthogonality:
    def test_adapted_functionals_pass(self):
        W = sample_brownian(build_grid(1.0, 128), 20000, seed=12)["W"]
        rep = martingale_increment_test(W, {"1": np.ones_like(W.values), "W": W.values, "sign W": np.sign(W.values)})
        assert rep.passed
        assert rep.n_tests == 3 * 8

    def test_anticipating_functional_fails(self):
        W = sample_brownian(build_grid(1.0, 128), 5000, seed=12)["W"]
        peek = np.broadcast_to(W.terminal()[:, None], W.values.shape)
        rep = martingale_increment_test(W, {"W_T": peek})
        assert not rep.passed
        assert rep.max_abs_t > 20

    def test_weights_and_mask(self):
        sums = increment_sums(np.array([[0.0, 1.0, 3.0]]), [np.ones((1, 3))], mask=np.array([[True, False]]), n_buckets=1)
        assert sums.shape == (1, 1, 1)
        assert sums[0, 0, 0] == 1.0
        rep = orthogonality_report(np.ones((4, 1, 1)), ["f"], [(0.0, 1.0)], weights=np.full(4, 2.0))
        assert rep.stats[0].estimate == 2.0
        assert rep.stats[0].t_stat == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            orthogonality_report(np.ones((2, 1, 1)), ["f"], [(0.0, 1.0)], weights=np.array([1.0, -1.0]))

    def test_report_dict(self):
        d = orthogonality_report(np.random.default_rng(0).normal(size=(50, 1, 2)), ["f"], [(0, 1), (1, 2)]).to_dict()
        assert set(d) >= {"passed", "max_abs_t", "threshold", "note", "stats"}
        assert len(d["stats"]) == 2


class TestWorkedExamples:
    def test_trivial_integrands(self):
        W = sample_brownian(build_grid(1.0, 16), 5, seed=1)["W"]
        np.testing.assert_array_equal(ito_integral(np.zeros_like(W.values), W).values, 0.0)
        np.testing.assert_allclose(ito_integral(np.ones_like(W.values), W).values, W.values, atol=1e-14)

    @given(arrays(float, (2, 5), elements=finite), arrays(float, (2, 5), elements=finite), finite)
    def test_linearity_in_integrand(self, h1, h2, c):
        Y = np.cumsum(np.ones((2, 5)), axis=1)
        lhs = ito_integral(h1 + c * h2, Y).values
        rhs = ito_integral(h1, Y).values + c * ito_integral(h2, Y).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_mean_ito_integral_matches_ito_formula(self):
        from insiderlab.engine import map_paths

        grid = build_grid(1.0, 256)
        r = map_paths(
            lambda e: {"ito": ito_integral(e["W"], e["W"]).terminal(), "rhs": 0.5 * (e["W"].terminal() ** 2 - 1.0)},
            grid, 100_000, 14,
        )
        diff = r["ito"] - r["rhs"]
        assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(diff.size)

    def test_constant_track_has_zero_bracket(self):
        np.testing.assert_array_equal(quadratic_variation(np.full((2, 5), 3.0)).values, 0.0)

    def test_bracket_of_exponential(self):
        sigma = 0.2
        grid = build_grid(1.0, 1024)
        W = sample_brownian(grid, 500, seed=15)["W"]
        X = stochastic_exponential(ProcessTrack("sW", sigma * W.values))
        qv = quadratic_variation(X).terminal()
        integral = (sigma**2 * X.values[:, :-1] ** 2 * grid.dt).sum(axis=1)
        # pathwise error is O(sqrt(dt)) relative
        assert np.max(np.abs(qv - integral) / integral) < 10 * math.sqrt(2 * grid.dt)
        assert abs(np.mean(qv - integral)) < 3 * np.std(qv - integral) / math.sqrt(500)

    def test_zero_exponent(self):
        np.testing.assert_array_equal(stochastic_exponential(np.zeros((2, 4))).values, 1.0)

    def test_independent_drivers_multiply(self):
        grid = build_grid(1.0, 4096)
        W1 = sample_brownian(grid, 200, seed=16)["W"].values
        W2 = sample_brownian(grid, 200, seed=17)["W"].values
        Y, Yp = 0.2 * W1, 0.3 * W2
        prod = stochastic_exponential(Y).values * stochastic_exponential(Yp).values
        joint = stochastic_exponential(Y + Yp).values
        # log(prod / joint) = [Y, Y'], a sum of independent products with sd 0.06 sqrt(dt)
        assert np.max(np.abs(np.log(prod / joint))) < 6 * 0.06 * math.sqrt(grid.dt)

    def test_drifted_driver_fails(self):
        grid = build_grid(1.0, 128)
        W = sample_brownian(grid, 25_000, seed=18)["W"]
        rep = martingale_increment_test(W.values + grid.nodes[None, :], {"1": np.ones_like(W.values)})
        assert not rep.passed
