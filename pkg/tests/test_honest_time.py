import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from insiderlab import engine
from insiderlab.engine import build_grid
from insiderlab.errors import ConfigurationError, InsufficientDataError
from insiderlab.honest_time import (
    HonestTimeScenario,
    drift_energy_per_path,
    entropy_objective_honest,
    information_drift_energy,
    last_argmax,
    pre_g_energy,
    qs_density,
    simulate_honest_time,
    terminal_density,
    what_test_mask,
)
from insiderlab.measures import mean_estimate


def tail_oracle(sigma: float, t: float) -> float:
    """E[X_t / S_t] = P(g > t) for X = E(sigma W) on an infinite horizon.

    By time reversal S_t / X_t has the law of exp(M) with M the running
    maximum at t of a Brownian motion with volatility sigma and drift
    +sigma^2/2, whose distribution function is closed form.
    """
    mu, s = 0.5 * sigma * sigma, sigma * math.sqrt(t)

    def cdf(m):
        # exp(2 mu m / sigma^2) Phi(.) in log space; the two factors over/underflow separately
        return norm.cdf((m - mu * t) / s) - math.exp(2 * mu * m / sigma**2 + norm.logcdf((-m - mu * t) / s))

    # E[exp(-M)] = int_0^inf exp(-m) dF(m) = int_0^inf exp(-m) F(m) dm  (F(0) = 0)
    val, _ = integrate.quad(lambda m: math.exp(-m) * cdf(m), 0.0, np.inf)
    return val


@pytest.fixture(scope="module")
def paths():
    sc = HonestTimeScenario(sigma=0.3, T=1.0)
    return simulate_honest_time(sc, build_grid(1.0, 512), 20000, seed=5)


class TestScenario:
    @pytest.mark.parametrize(
        "kw",
        [
            {"sigma": 0.0, "T": 1.0},
            {"sigma": -1.0, "T": 1.0},
            {"sigma": 0.3, "T": 0.0},
            {"sigma": 0.3, "T": 2.0, "T_sim": 1.0},
            {"sigma": 0.3, "T": 1.0, "trunc_eps": 1.0},
            {"sigma": 0.3, "T": 1.0, "floor_eps": 0.0},
            {"sigma": 0.3, "T": 1.0, "tail_mode": "ignore"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            HonestTimeScenario(**kw)

    def test_T_sim_defaults_to_T(self):
        assert HonestTimeScenario(0.3, 1.5).T_sim == 1.5

    def test_grid_must_match_T_sim(self):
        with pytest.raises(ConfigurationError):
            simulate_honest_time(HonestTimeScenario(0.3, 1.0, T_sim=2.0), build_grid(1.0, 8), 4, 1)


class TestPaths:
    def test_price_and_running_max(self, paths):
        W = paths["W"].values
        t = paths.grid.nodes
        np.testing.assert_allclose(paths["X"].values, np.exp(0.3 * W - 0.045 * t))
        np.testing.assert_array_equal(paths["S"].values, np.maximum.accumulate(paths["X"].values, axis=1))

    def test_last_argmax_takes_latest_tie(self):
        X = np.array([[1.0, 2.0, 1.5, 2.0, 1.0]])
        assert last_argmax(X, X.max(axis=1))[0] == 3

    def test_g_index_is_argmax_or_beyond(self, paths):
        X = paths["X"].values
        inside = ~paths.beyond
        rows = np.arange(paths.n_paths)[inside]
        np.testing.assert_array_equal(X[rows, paths.g_index[inside]], X[inside].max(axis=1))
        assert np.all(paths.g_index[paths.beyond] == paths.grid.n_steps + 1)
        assert np.all(np.isinf(paths.g_time()[paths.beyond]))

    def test_tail_probability_matches_oracle(self, paths):
        oracle = tail_oracle(0.3, 1.0)
        tail = mean_estimate(paths.tail_bound)
        beyond = mean_estimate(paths.beyond.astype(float))
        # grid maxima undershoot the continuous one by O(sqrt(dt))
        assert abs(tail.value - oracle) < 0.01
        assert beyond.within(tail.value, 4.0)

    def test_alpha_sign(self, paths):
        alpha = paths["alpha"].values
        pre = np.arange(paths.grid.n_nodes)[None, :] <= paths.g_index[:, None]
        assert np.all(alpha[pre] > 0)
        assert np.all(alpha[~pre] < 0)

    def test_what_increments(self, paths):
        sigma, dt = 0.3, paths.grid.dt
        X = paths["X"].values
        expected = paths["W"].diffs() - paths["alpha"].values[:, :-1] * sigma * X[:, :-1] * dt
        np.testing.assert_allclose(paths["What"].diffs(), expected)

    def test_drift_identity(self, paths):
        # X_t - X_0 - int alpha d<X> = sigma int X dWhat, up to the Ito error of the grid
        sigma, dt = 0.3, paths.grid.dt
        X = paths["X"].values
        alpha = paths["alpha"].values[:, :-1]
        drift = np.cumsum(alpha * (sigma * X[:, :-1]) ** 2 * dt, axis=1)
        stoch = np.cumsum(sigma * X[:, :-1] * paths["What"].diffs(), axis=1)
        err = (X[:, 1:] - 1.0) - drift - stoch
        rms = np.sqrt(np.mean(err[:, -1] ** 2))
        assert rms < sigma**2 * math.sqrt(dt)

    def test_truncate_mode_checks_tail(self):
        sc = HonestTimeScenario(sigma=0.3, T=1.0, tail_mode="truncate", trunc_eps=0.05)
        with pytest.raises(ConfigurationError):
            simulate_honest_time(sc, build_grid(1.0, 64), 200, 1)
        sc2 = HonestTimeScenario(sigma=1.0, T=1.0, T_sim=40.0, tail_mode="truncate", trunc_eps=0.05)
        p = simulate_honest_time(sc2, build_grid(40.0, 1280), 200, 1)
        assert not p.beyond.any()

    def test_branches_average_to_the_resolved_draw(self, paths):
        (p0, s0), (p1, s1) = paths.branches()
        np.testing.assert_allclose(p0 + p1, 1.0)
        assert np.all(s1 == paths.T_index)


class TestQSDensity:
    def test_equals_inverse_price_before_g(self, paths):
        R = qs_density(paths).values
        X = paths["X"].values
        before = np.arange(paths.grid.n_nodes)[None, :] <= paths.stop_index[:, None]
        np.testing.assert_allclose(R[before], 1.0 / X[before], rtol=1e-9)

    def test_frozen_after_g(self, paths):
        R = qs_density(paths)
        np.testing.assert_allclose(R.terminal(), R.at(paths.stop_index))
        np.testing.assert_allclose(terminal_density(paths), R.terminal())

    def test_mean_one(self, paths):
        assert mean_estimate(terminal_density(paths)).within(1.0, 3.0)

    def test_horizon_mismatch(self, paths):
        with pytest.raises(ConfigurationError):
            qs_density(paths, T=0.5)


class TestDriftEnergy:
    deltas = [2.0**-k for k in range(3, 8)]

    def test_nonnegative_and_monotone_in_delta(self, paths):
        e = drift_energy_per_path(paths, self.deltas)
        assert np.all(e >= 0)
        # a later start integrates over a subset of the same steps
        assert np.all(np.diff(e, axis=1) >= -1e-12)

    def test_means_grow_as_delta_halves(self, paths):
        prof = information_drift_energy(paths, self.deltas)
        assert prof.strictly_increasing
        assert prof.slope > 3 * prof.slope_std_error

    def test_pre_g_energy_is_sigma_squared_times_time(self, paths):
        np.testing.assert_allclose(pre_g_energy(paths), 0.09 * paths.stop_time, atol=1e-12)

    def test_invalid_and_insufficient(self, paths):
        with pytest.raises(ConfigurationError):
            drift_energy_per_path(paths, [0.0])
        with pytest.raises(InsufficientDataError):
            information_drift_energy(paths, [2.0])


class TestEntropy:
    def test_objective_zero_at_c_zero_and_matches_oracle(self):
        sc = HonestTimeScenario(sigma=1.0, T=1.0)
        # the grid maximum undershoots by O(sigma sqrt(dt)), which biases the density mean upward
        p = simulate_honest_time(sc, build_grid(1.0, 2048), 5000, seed=8)
        pts = entropy_objective_honest(p, [0.0, 0.5, 1.0])
        assert abs(pts[0].objective) <= 3 * pts[0].objective_se
        for pt in pts[1:]:
            assert pt.objective > 3 * pt.objective_se
            assert pt.objective == pytest.approx(pt.oracle, rel=0.1)
            assert pt.usable
        assert pts[1].objective < pts[2].objective

    def test_c_grid_needs_zero(self, paths):
        with pytest.raises(ConfigurationError):
            entropy_objective_honest(paths, [0.5])


def test_what_mask_excludes_window(paths):
    m = what_test_mask(paths, 5)
    assert m.shape == (paths.n_paths, paths.grid.n_steps)
    i = np.arange(paths.grid.n_steps)
    for row in range(20):
        g = paths.g_index[row]
        assert not m[row, (i > g - 6) & (i < g + 5)].any()


class TestWorkedExamples:
    def test_density_starts_at_one(self, paths):
        np.testing.assert_array_equal(qs_density(paths).values[:, 0], 1.0)

    def test_running_max_tail_is_one_over_x(self):
        # P(sup X >= x) = 1/x; the grid maximum undershoots by exp(0.5826 sigma sqrt(dt))
        sc = HonestTimeScenario(sigma=1.0, T=1.0, T_sim=40.0)
        grid = build_grid(40.0, 1280)
        p = simulate_honest_time(sc, grid, 4000, seed=2)
        shift = math.exp(0.5826 * math.sqrt(grid.dt))
        for x in (1.5, 2.0, 4.0):
            est = mean_estimate((p["S"].terminal() >= x).astype(float))
            assert abs(est.value - 1.0 / (x * shift)) <= 3 * est.std_error + 0.01

    def test_price_loses_value_under_qs(self, paths):
        est = mean_estimate(terminal_density(paths) * paths["X"].at(np.full(paths.n_paths, paths.T_index)))
        assert est.value < 1.0 - 3 * est.std_error

    def test_price_rises_before_g_under_p(self, paths):
        from insiderlab.measures import supermartingale_monotonicity

        cps = [0, 128, 256, 384, 512]
        gate = np.stack([paths.g_index > c for c in cps[:-1]], axis=1).astype(float)
        rep = supermartingale_monotonicity(paths["X"], None, cps, gate=gate)
        assert not rep.nonincreasing
        plain = supermartingale_monotonicity(paths["X"], None, cps)
        assert plain.nonincreasing
