"""A reference world ``Q*`` in which the insider's density is built by hand.

Under ``Q*`` the driver ``B`` is a Brownian motion and ``eta = +-1`` is an
independent fair sign.  The nonnegative martingale ``D* = 1 + eta * B``,
stopped either when it is absorbed at zero or when ``B`` leaves ``(-a, a)``,
defines ``P = D*_T . Q*``.  With ``F = 1`` the insider's drift is
``alpha = eta / D*`` and the candidate densities are ``R = E(-int alpha dM)``
and ``R+ = E(-int alpha^+ dM)``.

``P`` is never sampled: every ``P``-expectation is a ``Q*``-expectation
weighted by ``D*_T``.

Barrier hits between grid nodes are detected with the Brownian bridge
crossing probability ``exp(-2 d1 d2 / dt)``.  One ``Exp(1)`` variable per path
is compared with the cumulative crossing hazard, which draws the crossing
step with the right law and keeps every path's outcome a function of its own
random numbers only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import engine
from .calculus import OrthogonalityReport, orthogonality_report
from .engine import Ensemble, ProcessTrack, TimeGrid
from .errors import ConfigurationError, ConsistencyError
from .measures import STRICT_LOCAL, DefectReport, Estimate, martingale_defect, mean_estimate

VARIANTS = ("absorbing", "stopped")

# snapping tolerance for "the density has been absorbed"
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class DensityLabScenario:
    variant: str = "absorbing"
    T: float = 1.0
    a: float | None = None
    x0: float = 10.0
    bridge: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigurationError(f"T must be > 0, got {self.T}")
        if self.variant == "stopped":
            if self.a is None or not (0 < self.a < 1):
                raise ConfigurationError(f"stopped variant needs 0 < a < 1, got a={self.a}")
        elif self.a is not None:
            raise ConfigurationError("barrier a is only used by the stopped variant")
        if not math.isfinite(self.x0):
            raise ConfigurationError("x0 must be finite")


@dataclass
class LabPaths:
    """Tracks ``B, X, D*, G, alpha, M`` plus per-path sign and stopping nodes.

    ``stop_node`` is the first node at which ``D*`` is frozen (the barrier is
    hit during the step before it); ``n_steps + 1`` means never.  ``T0_node``
    equals ``stop_node`` in the absorbing variant and is always
    ``n_steps + 1`` in the stopped one.
    """

    scenario: DensityLabScenario
    grid: TimeGrid
    tracks: dict[str, ProcessTrack]
    eta: np.ndarray
    stop_node: np.ndarray
    frac: np.ndarray
    T0_node: np.ndarray
    path_offset: int = 0
    densities: dict[str, ProcessTrack] = field(default_factory=dict)

    def __getitem__(self, label: str) -> ProcessTrack:
        if label in self.tracks:
            return self.tracks[label]
        return self.densities[label]

    @property
    def n_paths(self) -> int:
        return self.eta.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """``dP/dQ*`` per path, i.e. ``D*_T``."""
        return self.tracks["D*"].terminal()

    @property
    def positivity_violations(self) -> int:
        return int((self.tracks["X"].values.min(axis=1) <= 0).sum())


def _signs(seed: int, start: int, stop: int) -> np.ndarray:
    u = engine.stream_uniforms(seed, engine.STREAM_SIGN, start, stop)[:, 0]
    return np.where(u < 0.5, 1.0, -1.0)


def _exp_clocks(seed: int, start: int, stop: int) -> np.ndarray:
    u = engine.stream_uniforms(seed, engine.STREAM_BRIDGE, start, stop)[:, 0]
    return -np.log1p(-u)


def _first_crossing(p: np.ndarray, clock: np.ndarray) -> np.ndarray:
    """First step whose cumulative hazard ``-sum log(1 - p)`` reaches ``clock``; ``n_steps`` if none."""
    with np.errstate(divide="ignore"):
        hazard = -np.log1p(-np.minimum(p, 1.0))
    cum = np.cumsum(hazard, axis=1)
    hit = cum >= clock[:, None]
    return np.where(hit.any(axis=1), np.argmax(hit, axis=1), p.shape[1])


def _bridge_p(d1: np.ndarray, d2: np.ndarray, dt: float, bridge: bool) -> np.ndarray:
    """Probability that a bridge from distance ``d1`` to ``d2`` touches the barrier."""
    crossed = (d1 <= 0) | (d2 <= 0)
    if not bridge:
        return crossed.astype(float)
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * np.maximum(d1, 0.0) * np.maximum(d2, 0.0) / dt)
    return np.where(crossed, 1.0, p)


def lab_from_ensemble(
    scenario: DensityLabScenario,
    ens: Ensemble,
    *,
    eta: np.ndarray | None = None,
    clock: np.ndarray | None = None,
) -> LabPaths:
    """Build ``LabPaths`` on the Brownian track ``"W"`` of an ensemble.

    ``eta`` and ``clock`` default to the ensemble's own sign and bridge
    substreams; passing them explicitly reuses them across grids.  ``eta = 0``
    gives the degenerate model ``G = 0``.
    """
    grid = ens.grid
    if abs(grid.horizon - scenario.T) > 1e-12 * scenario.T:
        raise ConfigurationError(f"grid horizon {grid.horizon} must equal T {scenario.T}")
    lo, hi = ens.path_offset, ens.path_offset + ens.n_paths
    if eta is None:
        eta = _signs(ens.seed, lo, hi)
    if clock is None:
        clock = _exp_clocks(ens.seed, lo, hi)
    eta = np.asarray(eta, dtype=float)
    B = ens["W"].values
    n, n_steps, dt = ens.n_paths, grid.n_steps, grid.dt

    if scenario.variant == "absorbing":
        D_free = 1.0 + eta[:, None] * B
        p = _bridge_p(D_free[:, :-1], D_free[:, 1:], dt, scenario.bridge)
        p[eta == 0] = 0.0
        step = _first_crossing(p, clock)
        barrier = -eta
    else:
        a = scenario.a
        up = _bridge_p(a - B[:, :-1], a - B[:, 1:], dt, scenario.bridge)
        down = _bridge_p(a + B[:, :-1], a + B[:, 1:], dt, scenario.bridge)
        step = _first_crossing(up + down, clock)
        rows = np.arange(n)
        k = np.minimum(step, n_steps - 1)
        barrier = np.where(up[rows, k] >= down[rows, k], a, -a)

    hit = step < n_steps
    stop_node = np.where(hit, step + 1, n_steps + 1)
    rows = np.arange(n)
    k = np.minimum(step, n_steps - 1)
    b1 = B[rows, k]
    b2 = B[rows, k + 1]
    # fraction of the crossing step spent before the hit
    gap = b2 - b1
    safe = np.where(np.abs(gap) > 0, gap, 1.0)
    lin = (barrier - b1) / safe
    through = (barrier - b1) * (barrier - b2) <= 0
    d1, d2 = np.abs(barrier - b1), np.abs(barrier - b2)
    theta = np.where(through & (np.abs(gap) > 0), lin, d1 / np.maximum(d1 + d2, 1e-300))
    theta = np.clip(theta, 0.0, 1.0)

    nodes = np.arange(grid.n_nodes)[None, :]
    frozen = nodes >= stop_node[:, None]
    Bs = np.where(frozen, np.where(hit, barrier, 0.0)[:, None], B)
    D = 1.0 + eta[:, None] * Bs
    if scenario.variant == "absorbing":
        D = np.where(frozen & hit[:, None], 0.0, D)
    D = np.maximum(D, 0.0)

    steps = np.arange(n_steps)[None, :]
    frac = np.where(steps < step[:, None], 1.0, 0.0)
    frac[rows[hit], step[hit]] = theta[hit]
    active = frac > 0
    G = np.where(np.arange(grid.n_nodes)[None, :] < stop_node[:, None], eta[:, None], 0.0)
    alpha = np.zeros_like(D)
    pos = D > 0
    np.divide(G, D, out=alpha, where=pos & (G != 0))
    alpha[:, :-1] = np.where(active, alpha[:, :-1], 0.0)
    alpha[:, -1] = 0.0

    dB = np.diff(B, axis=1)
    dM = dB - alpha[:, :-1] * frac * dt
    tracks = {
        "B": ProcessTrack("B", B),
        "X": ProcessTrack("X", scenario.x0 + B),
        "Bs": ProcessTrack("Bs", Bs),
        "D*": ProcessTrack("D*", D, stop_index=stop_node),
        "G": ProcessTrack("G", G),
        "alpha": ProcessTrack("alpha", alpha),
        "M": ProcessTrack.from_increments("M", dM),
    }
    T0 = stop_node if scenario.variant == "absorbing" else np.full(n, n_steps + 1)
    return LabPaths(scenario, grid, tracks, eta, stop_node, frac, T0, ens.path_offset)


def simulate_lab(
    scenario: DensityLabScenario,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    antithetic: bool = False,
    start: int = 0,
) -> LabPaths:
    ens = engine.sample_brownian(grid, n_paths, seed, antithetic, start=start)
    return lab_from_ensemble(scenario, ens)


SCHEMES = ("inverse", "log-euler")


def _step_factors(paths: LabPaths, h: np.ndarray) -> np.ndarray:
    """One-step factors ``1 + h dBs - h (alpha - h) dt`` of ``L = 1/E(-int h dM)``.

    Expanding ``-log`` of the factor gives ``-h dM - h^2 dt / 2`` to first
    order, so ``1/prod(factors)`` is a consistent scheme for the stochastic
    exponential.  With ``h = alpha`` the factors telescope to ``D*`` and
    ``L = D*`` holds exactly, including the step that reaches the barrier.
    """
    dt = paths.grid.dt
    alpha = paths.tracks["alpha"].values[:, :-1]
    dBs = paths.tracks["Bs"].diffs()
    h = h[:, :-1]
    f = 1.0 + h * dBs - h * (alpha - h) * paths.frac * dt
    return np.where(f <= ZERO_TOL, 0.0, f)


def _inverse_track(paths: LabPaths, h: np.ndarray, label: str) -> ProcessTrack:
    factors = _step_factors(paths, h)
    vals = np.ones((factors.shape[0], factors.shape[1] + 1))
    np.cumprod(factors, axis=1, out=vals[:, 1:])
    return ProcessTrack(label, vals)


def _reciprocal(L: ProcessTrack, label: str, stop: np.ndarray) -> ProcessTrack:
    """``1/L``, frozen at its last finite value once ``L`` has reached zero.

    Paths where ``L`` vanishes are ``P``-null (their weight ``D*_T`` is zero)
    and the exponential explodes there; freezing keeps the track finite.
    """
    Lv = L.values
    absorbed = Lv <= ZERO_TOL
    last = np.where(absorbed.any(axis=1), np.argmax(absorbed, axis=1) - 1, Lv.shape[1] - 1)
    vals = np.empty_like(Lv)
    np.divide(1.0, Lv, out=vals, where=~absorbed)
    frozen_val = 1.0 / Lv[np.arange(Lv.shape[0]), last]
    vals = np.where(absorbed, frozen_val[:, None], vals)
    return ProcessTrack(label, vals, stop_index=stop)


def _log_euler(paths: LabPaths, h: np.ndarray, label: str) -> ProcessTrack:
    dt = paths.grid.dt
    hh = h[:, :-1]
    # before the stop dM = dBs - alpha dt; the stopped driver already ends at the barrier
    dm = paths.tracks["Bs"].diffs() - paths.tracks["alpha"].values[:, :-1] * paths.frac * dt
    log_inc = -hh * dm - 0.5 * hh * hh * paths.frac * dt
    log_r = np.zeros(h.shape)
    np.cumsum(log_inc, axis=1, out=log_r[:, 1:])
    with np.errstate(over="raise"):
        return ProcessTrack(label, np.exp(log_r), stop_index=paths.stop_node)


def lab_densities(paths: LabPaths, scheme: str = "inverse") -> dict[str, ProcessTrack]:
    """Tracks ``R = E(-int alpha dM)`` and ``R+ = E(-int alpha^+ dM)``.

    ``"inverse"`` integrates ``1/R`` multiplicatively (see
    :func:`_step_factors`); ``"log-euler"`` sums ``-h dM - h^2 dt/2`` with the
    integrand frozen on each step, whose error is unbounded for paths that
    pass within ``sqrt(dt)`` of the barrier without touching it.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if scheme == "inverse":
        inv = inverse_densities(paths)
        paths.densities["R"] = _reciprocal(inv["L"], "R", paths.stop_node)
        paths.densities["R+"] = _reciprocal(inv["L+"], "R+", paths.stop_node)
    else:
        alpha = paths.tracks["alpha"].values
        paths.densities["R"] = _log_euler(paths, alpha, "R")
        paths.densities["R+"] = _log_euler(paths, np.maximum(alpha, 0.0), "R+")
    return {k: paths.densities[k] for k in ("R", "R+")}


def _absorbed_node(L: np.ndarray) -> np.ndarray:
    zero = L <= ZERO_TOL
    return np.where(zero.any(axis=1), np.argmax(zero, axis=1), L.shape[1])


def inverse_densities(paths: LabPaths) -> dict[str, ProcessTrack]:
    """``L = 1/R`` and ``L+ = 1/R+``; their first zeros are ``tau`` and ``tau+``."""
    if "L" not in paths.densities:
        alpha = paths.tracks["alpha"].values
        paths.densities["L"] = _inverse_track(paths, alpha, "L")
        paths.densities["L+"] = _inverse_track(paths, np.maximum(alpha, 0.0), "L+")
    return {k: paths.densities[k] for k in ("L", "L+")}


def stopping_nodes(paths: LabPaths) -> dict[str, np.ndarray]:
    """Nodes of ``T0``, ``tau``, ``tau+`` (``n_steps + 1`` when they never occur)."""
    inv = inverse_densities(paths)
    never = paths.grid.n_steps + 1
    tau = _absorbed_node(inv["L"].values)
    tau_p = _absorbed_node(inv["L+"].values)
    n_nodes = paths.grid.n_nodes
    return {
        "T0": paths.T0_node,
        "tau": np.where(tau < n_nodes, tau, never),
        "tau+": np.where(tau_p < n_nodes, tau_p, never),
    }


@dataclass
class TauStats:
    T: float
    frequencies: dict[str, Estimate]
    nested: bool
    n_paths: int

    @property
    def all_positive(self) -> bool:
        return all(e.ci95[0] > 0 for e in self.frequencies.values())

    @property
    def all_zero(self) -> bool:
        return all(e.value == 0.0 for e in self.frequencies.values())

    @property
    def equivalent(self) -> bool:
        """All three events have positive probability, or none has."""
        return self.all_positive or self.all_zero

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "frequencies": {k: v.to_dict() for k, v in self.frequencies.items()},
            "nested": self.nested,
            "all_positive": self.all_positive,
            "all_zero": self.all_zero,
            "equivalent": self.equivalent,
            "n_paths": self.n_paths,
        }


def tau_statistics_from_nodes(nodes: dict[str, np.ndarray], T_node: int, T: float) -> TauStats:
    """Frequencies of ``{T0 < T}``, ``{tau < T}``, ``{tau+ < T}`` from stopping nodes.

    A stop recorded at node ``k`` happened during step ``k-1``, hence strictly
    before ``t_k``; the event ``{. < T}`` is ``node <= T_node``.
    """
    events = {k: (v <= T_node) for k, v in nodes.items()}
    freqs = {}
    for k, e in events.items():
        est = mean_estimate(e.astype(float))
        freqs[k] = est
    nested = bool(np.all(events["tau+"] <= events["tau"]) and np.all(events["tau"] <= events["T0"]))
    return TauStats(T, freqs, nested, len(events["T0"]))


def tau_statistics(paths: LabPaths) -> TauStats:
    T_node = paths.grid.index_of(paths.scenario.T)
    return tau_statistics_from_nodes(stopping_nodes(paths), T_node, paths.scenario.T)


def defect_pair(
    R_T: np.ndarray,
    Rp_T: np.ndarray,
    weights: np.ndarray,
    *,
    coarse: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    order: float = 1.0,
) -> tuple[DefectReport, DefectReport]:
    """Martingale defects of ``R`` and ``R+`` under ``P`` (``D*_T``-weighted).

    ``coarse`` holds ``(R_T, R+_T, D*_T)`` from the same paths on the
    half-resolution grid and sets the discretisation margin.  Disagreeing
    verdicts raise :class:`ConsistencyError`.
    """
    cr = (coarse[0], coarse[2]) if coarse is not None else None
    cp = (coarse[1], coarse[2]) if coarse is not None else None
    rep_r = martingale_defect(R_T, weights, coarse=cr, order=order)
    rep_p = martingale_defect(Rp_T, weights, coarse=cp, order=order)
    if (rep_r.verdict == STRICT_LOCAL) != (rep_p.verdict == STRICT_LOCAL):
        raise ConsistencyError(
            f"defect verdicts disagree: R is {rep_r.verdict}, R+ is {rep_p.verdict}; "
            "the grid is probably too coarse"
        )
    return rep_r, rep_p


def null_projection_sums(paths: LabPaths, functionals: dict[str, np.ndarray], n_buckets: int = 8) -> np.ndarray:
    """Per-path bucket averages of ``G_t f_t``, shape ``(n_paths, n_f, n_buckets)``."""
    G = paths.tracks["G"].values
    edges = np.linspace(0, G.shape[1], n_buckets + 1).round().astype(int)
    out = np.empty((G.shape[0], len(functionals), n_buckets))
    for k, f in enumerate(functionals.values()):
        prod = G * f
        for b in range(n_buckets):
            out[:, k, b] = prod[:, edges[b] : edges[b + 1]].mean(axis=1)
    return out


def null_projection_buckets(grid: TimeGrid, n_buckets: int = 8) -> list[tuple[float, float]]:
    edges = np.linspace(0, grid.n_nodes, n_buckets + 1).round().astype(int)
    t = grid.nodes
    return [(float(t[lo]), float(t[hi - 1])) for lo, hi in zip(edges[:-1], edges[1:])]


def default_functionals(paths: LabPaths) -> dict[str, np.ndarray]:
    """``1``, ``B_t`` and ``sign(B_t)``: adapted to the driver alone."""
    B = paths.tracks["B"].values
    return {"1": np.ones_like(B), "B": B, "sign(B)": np.sign(B)}


def null_projection_test(
    paths: LabPaths,
    test_functionals: dict[str, np.ndarray] | None = None,
    n_buckets: int = 8,
) -> OrthogonalityReport:
    """t-statistics of ``E[G_t f(B-history)]`` averaged over time buckets."""
    funcs = test_functionals or default_functionals(paths)
    sums = null_projection_sums(paths, funcs, n_buckets)
    return orthogonality_report(sums, list(funcs), null_projection_buckets(paths.grid, n_buckets))


def lab_per_path(
    scenario: DensityLabScenario,
    ens: Ensemble,
    coarse: bool = True,
    scheme: str = "inverse",
    extra=None,
) -> dict[str, np.ndarray]:
    """Per-path scalars for chunked runs: terminal densities, weights, stopping nodes.

    With ``coarse`` the same Brownian path, sign and clock are replayed on
    the grid with half the steps.  ``extra(paths)`` may add more per-path
    outputs computed from the fine paths.
    """
    paths = lab_from_ensemble(scenario, ens)
    dens = lab_densities(paths, scheme)
    nodes = stopping_nodes(paths)
    out = {
        "R_T": dens["R"].terminal(),
        "R+_T": dens["R+"].terminal(),
        "D_T": paths.weights,
        "eta": paths.eta,
        "T0": nodes["T0"],
        "tau": nodes["tau"],
        "tau+": nodes["tau+"],
        "min_X": paths.tracks["X"].values.min(axis=1),
        "DR_gap": np.abs(paths.tracks["D*"].terminal() * dens["R"].terminal() - 1.0) * (nodes["T0"] > paths.grid.n_steps),
    }
    if coarse and ens.grid.n_steps % 2 == 0:
        cgrid = ens.grid.coarsen(2)
        W = ens["W"]
        cens = Ensemble(cgrid, ens.n_paths, ens.seed, {"W": ProcessTrack("W", W.values[:, ::2])}, path_offset=ens.path_offset)
        cp = lab_from_ensemble(scenario, cens, eta=paths.eta, clock=_exp_clocks(ens.seed, ens.path_offset, ens.path_offset + ens.n_paths))
        cd = lab_densities(cp, scheme)
        out.update({"R_T_coarse": cd["R"].terminal(), "R+_T_coarse": cd["R+"].terminal(), "D_T_coarse": cp.weights})
    if extra is not None:
        out.update(extra(paths))
    return out


def hitting_oracle(T: float) -> float:
    """``Q*(T0 < T) = 2 Phi(-1/sqrt(T))`` for ``D* = 1 + eta B`` absorbed at 0."""
    return float(2.0 * norm.cdf(-1.0 / math.sqrt(T)))
