"""Insider who learns the last passage time of the price at its all-time high.

The price is ``X = E(sigma W)``, ``S`` its running maximum and ``g`` the last
time ``X`` sits at ``S_inf``.  In the insider's filtration the price has drift
density ``alpha = 1/X`` before ``g`` and ``-1/(S - X)`` after it.

The supremum over ``[0, inf)`` is handled exactly: given the path up to the
simulation horizon, the probability that a later excursion beats the current
maximum is ``X_{T_sim} / S_{T_sim}`` (optional stopping for the exponential
martingale).  In ``"resolve"`` mode one uniform per path decides that event,
so ``g`` is either the last grid argmax or known to lie beyond ``T_sim``.
``"truncate"`` mode ignores the tail and rejects runs whose mean tail
probability exceeds ``trunc_eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Ensemble, ProcessTrack, TimeGrid, path_mean, path_std_error
from .errors import ConfigurationError, InsufficientDataError
from .measures import EntropyReport, mean_estimate

TAIL_MODES = ("resolve", "truncate")


@dataclass(frozen=True)
class HonestTimeScenario:
    sigma: float
    T: float
    T_sim: float | None = None
    trunc_eps: float = 0.05
    floor_eps: float = 1e-6
    tail_mode: str = "resolve"

    def __post_init__(self) -> None:
        if self.T_sim is None:
            object.__setattr__(self, "T_sim", self.T)
        self.validate()

    def validate(self) -> None:
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigurationError(
                f"sigma must be > 0 (sigma = 0 makes X constant and g degenerate), got {self.sigma}"
            )
        if not (self.T > 0):
            raise ConfigurationError(f"T must be > 0, got {self.T}")
        if not (self.T <= self.T_sim):
            raise ConfigurationError(f"T must not exceed T_sim (T={self.T}, T_sim={self.T_sim})")
        if not (0 < self.trunc_eps < 1):
            raise ConfigurationError(f"trunc_eps must lie in (0,1), got {self.trunc_eps}")
        if not (self.floor_eps > 0):
            raise ConfigurationError(f"floor_eps must be > 0, got {self.floor_eps}")
        if self.tail_mode not in TAIL_MODES:
            raise ConfigurationError(f"tail_mode must be one of {TAIL_MODES}, got {self.tail_mode!r}")


@dataclass
class HonestTimePaths:
    """Tracks ``X, S, W, What, alpha`` and the per-path last passage index.

    ``g_index == grid.n_steps + 1`` marks paths whose supremum is attained
    after the simulation horizon.
    """

    scenario: HonestTimeScenario
    grid: TimeGrid
    tracks: dict[str, ProcessTrack]
    g_index: np.ndarray
    tail_bound: np.ndarray
    path_offset: int = 0
    g_grid: np.ndarray | None = None
    T_index: int = field(init=False)

    def __post_init__(self) -> None:
        self.T_index = self.grid.index_of(self.scenario.T)

    def __getitem__(self, label: str) -> ProcessTrack:
        return self.tracks[label]

    @property
    def n_paths(self) -> int:
        return self.g_index.shape[0]

    @property
    def beyond(self) -> np.ndarray:
        return self.g_index > self.grid.n_steps

    @property
    def stop_index(self) -> np.ndarray:
        """Node index of ``g ^ T``."""
        return np.minimum(self.g_index, self.T_index)

    @property
    def stop_time(self) -> np.ndarray:
        return self.stop_index * self.grid.dt

    def branches(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(probability, stop index)`` pairs given the simulated path.

        In ``"resolve"`` mode the supremum lies beyond ``T_sim`` with
        probability ``tail_bound``, which puts ``g ^ T`` at ``T``; otherwise it
        is the grid argmax.  Averaging a statistic over both branches is its
        conditional expectation given the path (Rao-Blackwellisation of the
        tail draw).
        """
        if self.scenario.tail_mode != "resolve" or self.g_grid is None:
            return [(np.ones(self.n_paths), self.stop_index)]
        p = self.tail_bound
        return [
            (1.0 - p, np.minimum(self.g_grid, self.T_index)),
            (p, np.full(self.n_paths, self.T_index)),
        ]

    def g_time(self) -> np.ndarray:
        """Last passage time on the grid; ``inf`` beyond the horizon."""
        t = self.g_index * self.grid.dt
        return np.where(self.beyond, np.inf, t)


def last_argmax(X: np.ndarray, S_end: np.ndarray) -> np.ndarray:
    """Last node index where ``X`` equals its overall maximum (ties: latest)."""
    rev = X[:, ::-1] == S_end[:, None]
    return X.shape[1] - 1 - np.argmax(rev, axis=1)


def honest_time_from_ensemble(scenario: HonestTimeScenario, ens: Ensemble, check_truncation: bool = True) -> HonestTimePaths:
    grid = ens.grid
    if abs(grid.horizon - scenario.T_sim) > 1e-12 * scenario.T_sim:
        raise ConfigurationError(f"grid horizon {grid.horizon} must equal T_sim {scenario.T_sim}")
    sigma, dt = scenario.sigma, grid.dt
    W = ens["W"]
    dW = W.diffs()
    t = grid.nodes

    log_x = sigma * W.values - 0.5 * sigma * sigma * t
    X = np.exp(log_x)
    S = np.maximum.accumulate(X, axis=1)
    S_end = S[:, -1]
    g_grid = last_argmax(X, S_end)
    g_index = g_grid
    tail = X[:, -1] / S_end

    if scenario.tail_mode == "resolve":
        u = engine.stream_uniforms(ens.seed, engine.STREAM_TAIL, ens.path_offset, ens.path_offset + ens.n_paths)[:, 0]
        g_index = np.where(u < tail, grid.n_steps + 1, g_index)
    elif check_truncation:
        check_tail(tail, scenario)

    nodes = np.arange(grid.n_nodes)
    pre = nodes[None, :] <= g_index[:, None]
    gap = np.maximum(S - X, scenario.floor_eps * S)
    alpha = np.where(pre, 1.0 / X, -1.0 / gap)

    # dW = dWhat + alpha * sigma * X dt, read at left endpoints
    drift = alpha[:, :-1] * sigma * X[:, :-1] * dt
    What = ProcessTrack.from_increments("What", dW - drift)

    tracks = {
        "W": W,
        "X": ProcessTrack("X", X),
        "S": ProcessTrack("S", S),
        "What": What,
        "alpha": ProcessTrack("alpha", alpha),
    }
    return HonestTimePaths(scenario, grid, tracks, g_index, tail, ens.path_offset, g_grid)


def check_tail(tail_bound: np.ndarray, scenario: HonestTimeScenario) -> None:
    m = float(np.mean(tail_bound))
    if m > scenario.trunc_eps:
        raise ConfigurationError(
            f"mean tail bound X_Tsim/S_Tsim = {m:.4f} exceeds trunc_eps = {scenario.trunc_eps}; "
            "raise T_sim or use tail_mode='resolve'"
        )


def simulate_honest_time(
    scenario: HonestTimeScenario,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    antithetic: bool = False,
    start: int = 0,
) -> HonestTimePaths:
    ens = engine.sample_brownian(grid, n_paths, seed, antithetic, start=start)
    return honest_time_from_ensemble(scenario, ens)


def _scaled_density(paths: HonestTimePaths, scale: float) -> ProcessTrack:
    """``E(-scale * sigma * What)`` stopped at ``g ^ T``."""
    sigma = paths.scenario.sigma
    stop = paths.stop_index
    What = paths["What"].values
    n_nodes = What.shape[1]
    idx = np.minimum(np.arange(n_nodes)[None, :], stop[:, None])
    w_stop = np.take_along_axis(What, idx, axis=1)
    t_stop = idx * paths.grid.dt
    k = scale * sigma
    values = np.exp(-k * w_stop - 0.5 * k * k * t_stop)
    return ProcessTrack("R+" if scale == 1.0 else f"R({scale:g})", values, stop_index=stop)


def qs_density(paths: HonestTimePaths, T: float | None = None) -> ProcessTrack:
    """Density process of the minimal supermartingale measure, stopped at ``g ^ T``.

    On ``[0, g]`` this equals ``1 / X``: the insider's drift there is exactly
    cancelled by the Girsanov shift of ``What``.
    """
    if T is not None and abs(T - paths.scenario.T) > 1e-12:
        raise ConfigurationError("qs_density horizon must match the scenario's T")
    return _scaled_density(paths, 1.0)


def terminal_density(paths: HonestTimePaths, scale: float = 1.0) -> np.ndarray:
    """``E(-scale * sigma * What)_{g ^ T}`` per path, without building the track."""
    sigma = paths.scenario.sigma
    stop = paths.stop_index
    w = paths["What"].at(stop)
    k = scale * sigma
    return np.exp(-k * w - 0.5 * k * k * stop * paths.grid.dt)


@dataclass
class EnergyProfile:
    """Information-drift energy after ``g + delta`` for a list of offsets."""

    deltas: list[float]
    means: list[float]
    std_errors: list[float]
    conditional_means: list[float | None]
    counts: list[int]
    slope: float
    slope_std_error: float
    n_paths: int
    insufficient: list[bool]

    @property
    def strictly_increasing(self) -> bool:
        order = np.argsort(self.deltas)[::-1]
        m = [self.means[i] for i in order]
        return all(b > a for a, b in zip(m, m[1:]))

    @property
    def slope_t(self) -> float:
        return self.slope / self.slope_std_error if self.slope_std_error > 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "deltas": self.deltas,
            "means": self.means,
            "std_errors": self.std_errors,
            "conditional_means": self.conditional_means,
            "counts": self.counts,
            "slope_vs_log_inv_delta": self.slope,
            "slope_std_error": self.slope_std_error,
            "slope_t": self.slope_t,
            "strictly_increasing": self.strictly_increasing,
            "insufficient_data": self.insufficient,
            "n_paths": self.n_paths,
            "R_status": "undefined: integrability failure (energy diverges after g)",
        }


def drift_energy_per_path(paths: HonestTimePaths, deltas: list[float], resolution: float = 1.0) -> np.ndarray:
    """``int_{g+delta}^{T} alpha^2 d<M>`` per path and offset, zero when ``g + delta >= T``.

    After ``g`` the denominator ``S - X`` is floored at
    ``resolution * sigma * X * sqrt(dt)``, the size of one grid step of the
    price.  A grid node that lands closer to ``S`` than that is not resolved
    by the simulation, and without the floor such single nodes give the
    estimator an infinite variance.  ``resolution=0`` keeps only the
    ``floor_eps`` floor of ``alpha``.
    """
    if any(d <= 0 for d in deltas):
        raise ConfigurationError("every delta must be positive")
    sigma, dt = paths.scenario.sigma, paths.grid.dt
    nT = paths.T_index
    X = paths["X"].values[:, :nT]
    S = paths["S"].values[:, :nT]
    pre = np.arange(nT)[None, :] <= paths.g_index[:, None]
    floor = np.maximum(paths.scenario.floor_eps * S, resolution * sigma * X * math.sqrt(dt))
    ratio = np.where(pre, 1.0, X / np.maximum(S - X, floor))
    e = (sigma * ratio) ** 2 * dt
    # tail[i] = sum_{j >= i, j < nT} e_j
    tail = np.zeros((e.shape[0], nT + 1))
    tail[:, :nT] = np.cumsum(e[:, ::-1], axis=1)[:, ::-1]
    g = paths.g_index
    out = np.zeros((e.shape[0], len(deltas)))
    rows = np.arange(e.shape[0])
    for k, d in enumerate(deltas):
        off = int(math.ceil(d / dt - 1e-9))
        start = g + off
        ok = start < nT
        out[ok, k] = tail[rows[ok], start[ok]]
    return out


def pre_g_energy(paths: HonestTimePaths) -> np.ndarray:
    """``int_0^{g ^ T} alpha^2 d<M>`` per path (equals ``sigma^2 (g ^ T)``)."""
    sigma, dt = paths.scenario.sigma, paths.grid.dt
    X = paths["X"].values
    alpha = paths["alpha"].values
    e = (alpha[:, :-1] * sigma * X[:, :-1]) ** 2 * dt
    steps = np.arange(e.shape[1])[None, :] < paths.stop_index[:, None]
    return np.where(steps, e, 0.0).sum(axis=1)


def summarize_energy(per_path: np.ndarray, deltas: list[float]) -> EnergyProfile:
    """Reduce per-path energies; slope of the mean against ``log(1/delta)``.

    The slope is an OLS linear functional of the per-delta means, so it is
    evaluated path by path and its standard error is the usual one of a mean.
    """
    n = per_path.shape[0]
    means = [float(path_mean(per_path[:, k])) for k in range(len(deltas))]
    ses = [float(path_std_error(per_path[:, k])) for k in range(len(deltas))]
    counts, cond, insufficient = [], [], []
    for k in range(len(deltas)):
        # a path contributes iff g + delta < T; energy > 0 exactly on those paths
        pos = per_path[:, k] > 0
        c = int(pos.sum())
        counts.append(c)
        insufficient.append(c == 0)
        cond.append(float(per_path[pos, k].mean()) if c else None)
    x = np.log(1.0 / np.asarray(deltas, dtype=float))
    if len(deltas) >= 2 and np.ptp(x) > 0:
        wts = (x - x.mean()) / np.sum((x - x.mean()) ** 2)
        slopes = per_path @ wts
        slope, slope_se = float(path_mean(slopes)), float(path_std_error(slopes))
    else:
        slope, slope_se = math.nan, math.nan
    return EnergyProfile(list(map(float, deltas)), means, ses, cond, counts, slope, slope_se, n, insufficient)


def information_drift_energy(paths: HonestTimePaths, deltas: list[float], resolution: float = 1.0) -> EnergyProfile:
    per_path = drift_energy_per_path(paths, deltas, resolution)
    prof = summarize_energy(per_path, deltas)
    if all(prof.insufficient):
        raise InsufficientDataError("no path has g + delta < T for any requested delta")
    return prof


@dataclass
class EntropyPoint:
    c: float
    report: EntropyReport
    density_mean: float
    density_se: float
    usable: bool
    oracle: float
    oracle_se: float

    @property
    def objective(self) -> float:
        return self.report.objective

    @property
    def objective_se(self) -> float:
        return self.report.objective_std_error

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "objective": self.objective,
            "objective_std_error": self.objective_se,
            "relative_entropy": self.report.H_raw,
            "relative_entropy_std_error": self.report.std_error,
            "energy_term": self.report.energy_term,
            "density_mean": self.density_mean,
            "density_std_error": self.density_se,
            "usable": self.usable,
            "girsanov_oracle": self.oracle,
            "girsanov_oracle_std_error": self.oracle_se,
        }


def entropy_terms_per_path(paths: HonestTimePaths, c_grid: list[float]) -> dict[str, np.ndarray]:
    """Per-path, tail-averaged terms of the objective for ``Q_c = E(-(1+c) int alpha^+ dM)``.

    Columns per ``c``: density mean, ``rho log rho``, ``rho * energy`` and
    ``rho * tau``, each averaged over :meth:`HonestTimePaths.branches`.
    """
    sigma, dt = paths.scenario.sigma, paths.grid.dt
    W = paths["W"]
    shape = (paths.n_paths, len(c_grid))
    out = {k: np.zeros(shape) for k in ("rho", "rho_log_rho", "rho_energy", "rho_tau")}
    for prob, stop in paths.branches():
        tau = stop * dt
        # every branch stops at or before its own g, where What = W - sigma t; the
        # "What" track follows the drawn g and is wrong for the other branch
        w_stop = W.at(stop) - sigma * tau
        for j, c in enumerate(c_grid):
            k = (1.0 + c) * sigma
            log_rho = -k * w_stop - 0.5 * k * k * tau
            rho = np.exp(log_rho)
            out["rho"][:, j] += prob * rho
            out["rho_log_rho"][:, j] += prob * rho * log_rho
            out["rho_energy"][:, j] += prob * rho * 0.5 * sigma * sigma * tau
            out["rho_tau"][:, j] += prob * rho * tau
    return out


def summarize_entropy(terms: dict[str, np.ndarray], sigma: float, c_grid: list[float]) -> list[EntropyPoint]:
    """Objective ``H(Q_c|P) - E_Q_c[sigma^2 (g ^ T)] / 2`` for each ``c``.

    The oracle column is ``c(2+c)/2 * sigma^2 * E_Q_c[g ^ T]``, obtained from
    the Girsanov shift of ``What`` under ``Q_c``; it shares the sample but not
    the estimator.
    """
    points = []
    for j, c in enumerate(c_grid):
        h = mean_estimate(terms["rho_log_rho"][:, j])
        e = mean_estimate(terms["rho_energy"][:, j])
        obj = mean_estimate(terms["rho_log_rho"][:, j] - terms["rho_energy"][:, j])
        rep = EntropyReport(
            H_estimate=max(h.value, -3.0 * h.std_error),
            std_error=h.std_error,
            H_raw=h.value,
            n_paths=h.n,
            energy_term=e.value,
            energy_std_error=e.std_error,
            objective=obj.value,
            objective_std_error=obj.std_error,
        )
        dm = mean_estimate(terms["rho"][:, j])
        oracle = mean_estimate(0.5 * c * (2.0 + c) * sigma * sigma * terms["rho_tau"][:, j])
        points.append(EntropyPoint(float(c), rep, dm.value, dm.std_error, dm.within(1.0, 5.0), oracle.value, oracle.std_error))
    return points


def entropy_objective_honest(paths: HonestTimePaths, c_grid: list[float]) -> list[EntropyPoint]:
    check_c_grid(c_grid)
    return summarize_entropy(entropy_terms_per_path(paths, c_grid), paths.scenario.sigma, c_grid)


def check_c_grid(c_grid: list[float]) -> None:
    if 0.0 not in [float(c) for c in c_grid]:
        raise ConfigurationError("c_grid must contain 0")
    if any(c < 0 for c in c_grid):
        raise ConfigurationError("c_grid entries must be nonnegative")


def what_test_mask(paths: HonestTimePaths, window: int) -> np.ndarray:
    """Steps on ``[0, g - window*dt] u [g + window*dt, T]`` (left endpoint rule)."""
    n_steps = paths.grid.n_steps
    i = np.arange(n_steps)[None, :]
    g = paths.g_index[:, None]
    inside = i < paths.T_index
    return inside & ((i + 1 <= g - window) | (i >= g + window))
