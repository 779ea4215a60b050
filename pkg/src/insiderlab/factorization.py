"""Products of orthogonal positive local martingales.

Two settings are checked.  With independent drivers ``U = E(sigma_U W1)`` and
``Z = E(sigma_Z W2)`` the product ``UZ`` is a square-integrable martingale
and each factor has mean one.  With a single driver ``L = sigma W`` and a
deterministic switching process ``H`` in ``{0, 1}``, ``U = E(int H dL)`` and
``Z = E(int (1-H) dL)`` split ``E(L)`` into factors whose brackets live on
disjoint time sets, so ``U Z = E(L)`` and both factors are martingales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .calculus import ito_integral, stochastic_exponential
from .engine import Ensemble, ProcessTrack, TimeGrid
from .errors import ConfigurationError
from .measures import Estimate, mean_estimate

MODES = ("independent_drivers", "regime_switch")

DEFAULT_SCHEDULES = (
    (),
    (0.5,),
    (1.0 / 3.0, 2.0 / 3.0),
    (0.1, 0.23, 0.37, 0.6, 0.85),
)


@dataclass(frozen=True)
class FactorizationScenario:
    mode: str = "independent_drivers"
    sigma_u: float = 0.2
    sigma_z: float = 0.2
    sigma: float = 0.2
    T: float = 1.0
    schedules: tuple[tuple[float, ...], ...] = DEFAULT_SCHEDULES

    def __post_init__(self) -> None:
        object.__setattr__(self, "schedules", tuple(tuple(float(t) for t in s) for s in self.schedules))
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("sigma_u", "sigma_z", "sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigurationError(f"T must be > 0, got {self.T}")
        for s in self.schedules:
            if any(not (0 < t < self.T) for t in s):
                raise ConfigurationError(f"switch times must lie in (0, T), got {s}")
            if any(b <= a for a, b in zip(s, s[1:])):
                raise ConfigurationError(f"switch times must be increasing, got {s}")


def switch_indicator(grid: TimeGrid, switch_times: tuple[float, ...]) -> np.ndarray:
    """``H`` at every node: 1 on ``[0, s_1)``, 0 on ``[s_1, s_2)``, and so on.

    A switch takes effect at the first node at or after its time, so the
    left-endpoint integrand is predictable.
    """
    t = grid.nodes
    flips = np.searchsorted(np.asarray(switch_times, dtype=float), t + 1e-12 * grid.dt, side="right")
    return (flips % 2 == 0).astype(float)


@dataclass
class FactorizationReport:
    mode: str
    label: str
    means: dict[str, Estimate]
    second_moment: Estimate | None = None
    second_moment_oracle: float | None = None
    cross_variation: Estimate | None = None
    product_gap: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        """All factor means within 3 SE of one and cross variation within 3 SE of zero."""
        ok = all(e.within(1.0, 3.0) for e in self.means.values())
        if self.cross_variation is not None:
            ok = ok and self.cross_variation.within(0.0, 3.0)
        return bool(ok)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "label": self.label,
            "passed": self.passed,
            "means": {k: v.to_dict() for k, v in self.means.items()},
        }
        if self.second_moment is not None:
            d["second_moment"] = self.second_moment.to_dict()
            d["second_moment_oracle"] = self.second_moment_oracle
        if self.cross_variation is not None:
            d["cross_variation"] = self.cross_variation.to_dict()
        if self.product_gap is not None:
            d["max_product_gap"] = self.product_gap
        d.update(self.extra)
        return d


def independent_per_path(scenario: FactorizationScenario, ens: Ensemble) -> dict[str, np.ndarray]:
    """Terminal ``U, Z, UZ`` and the realised cross variation ``sum dU dZ`` per path."""
    lo, hi = ens.path_offset, ens.path_offset + ens.n_paths
    W1 = ens["W"]
    W2 = ProcessTrack.from_increments(
        "W2", engine.brownian_increments(ens.grid, lo, hi, ens.seed, ens.antithetic, engine.STREAM_W2)
    )
    U = stochastic_exponential(ProcessTrack("sW1", scenario.sigma_u * W1.values), label="U")
    Z = stochastic_exponential(ProcessTrack("sW2", scenario.sigma_z * W2.values), label="Z")
    return {
        "U_T": U.terminal(),
        "Z_T": Z.terminal(),
        "UZ_T": U.terminal() * Z.terminal(),
        "cross": (U.diffs() * Z.diffs()).sum(axis=1),
    }


def summarize_independent(scenario: FactorizationScenario, per_path: dict[str, np.ndarray]) -> FactorizationReport:
    uz = per_path["UZ_T"]
    return FactorizationReport(
        mode="independent_drivers",
        label=f"sigma_u={scenario.sigma_u:g},sigma_z={scenario.sigma_z:g}",
        means={"U_T": mean_estimate(per_path["U_T"]), "Z_T": mean_estimate(per_path["Z_T"]), "UZ_T": mean_estimate(uz)},
        second_moment=mean_estimate(uz * uz),
        second_moment_oracle=math.exp((scenario.sigma_u**2 + scenario.sigma_z**2) * scenario.T),
        cross_variation=mean_estimate(per_path["cross"]),
    )


def orthogonal_product_check(
    scenario: FactorizationScenario, grid: TimeGrid, n_paths: int, seed: int, *, workers: int = 1
) -> FactorizationReport:
    if scenario.mode != "independent_drivers":
        raise ConfigurationError("orthogonal_product_check needs mode 'independent_drivers'")
    _check_grid(scenario, grid)
    per = engine.map_paths(lambda e: independent_per_path(scenario, e), grid, n_paths, seed, workers=workers)
    return summarize_independent(scenario, per)


def regime_per_path(scenario: FactorizationScenario, ens: Ensemble, schedule: tuple[float, ...]) -> dict[str, np.ndarray]:
    """Terminal ``U, Z``, the pathwise gap ``|UZ - E(L)|`` and the cross variation of the two integrals."""
    grid = ens.grid
    L = ProcessTrack("L", scenario.sigma * ens["W"].values)
    H = np.broadcast_to(switch_indicator(grid, schedule), L.values.shape)
    A = ito_integral(H, L, label="int H dL")
    C = ito_integral(1.0 - H, L, label="int (1-H) dL")
    U = stochastic_exponential(A, label="U")
    Z = stochastic_exponential(C, label="Z")
    EL = stochastic_exponential(L, label="E(L)")
    gap = np.abs(U.values * Z.values - EL.values).max(axis=1)
    return {
        "U_T": U.terminal(),
        "Z_T": Z.terminal(),
        "gap": gap,
        "cross": (A.diffs() * C.diffs()).sum(axis=1),
    }


def summarize_regime(schedule: tuple[float, ...], per_path: dict[str, np.ndarray]) -> FactorizationReport:
    return FactorizationReport(
        mode="regime_switch",
        label=f"K={len(schedule)}",
        means={"U_T": mean_estimate(per_path["U_T"]), "Z_T": mean_estimate(per_path["Z_T"])},
        cross_variation=mean_estimate(per_path["cross"]),
        product_gap=float(per_path["gap"].max()),
        extra={"K": len(schedule), "switch_times": list(schedule)},
    )


def regime_switch_check(
    scenario: FactorizationScenario, grid: TimeGrid, n_paths: int, seed: int, *, workers: int = 1
) -> list[FactorizationReport]:
    """One report per configured switch schedule, all on the same Brownian paths."""
    if scenario.mode != "regime_switch":
        raise ConfigurationError("regime_switch_check needs mode 'regime_switch'")
    _check_grid(scenario, grid)

    def fn(ens: Ensemble) -> dict[str, np.ndarray]:
        out = {}
        for k, sched in enumerate(scenario.schedules):
            for key, v in regime_per_path(scenario, ens, sched).items():
                out[f"{k}:{key}"] = v
        return out

    per = engine.map_paths(fn, grid, n_paths, seed, workers=workers)
    return [
        summarize_regime(sched, {key: per[f"{k}:{key}"] for key in ("U_T", "Z_T", "gap", "cross")})
        for k, sched in enumerate(scenario.schedules)
    ]


def _check_grid(scenario: FactorizationScenario, grid: TimeGrid) -> None:
    if abs(grid.horizon - scenario.T) > 1e-12 * scenario.T:
        raise ConfigurationError(f"grid horizon {grid.horizon} must equal T {scenario.T}")
