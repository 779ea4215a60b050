"""Self-financing strategies in one risky asset with a constant riskless asset.

A strategy holds ``phi_{t_i}`` units of ``X`` over ``(t_i, t_{i+1}]``; the
position is decided at the left endpoint from the path prefix and, for the
insider, from whether the last passage time ``g`` has already occurred.
Wealth is ``V_{t_{i+1}} = V_{t_i} + phi_{t_i} (X_{t_{i+1}} - X_{t_i})``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .engine import ProcessTrack, path_mean, path_std_error
from .errors import ConfigurationError
from .measures import weighted_expectation


@dataclass
class StrategyContext:
    """What a position rule may look at.  ``g_index`` is insider information."""

    X: np.ndarray
    S: np.ndarray
    n_steps: int
    g_index: np.ndarray | None = None

    def after_g(self) -> np.ndarray:
        """``1{t_i >= g}`` per step: the insider knows at ``t_i`` whether ``g`` has passed."""
        if self.g_index is None:
            raise ConfigurationError("this rule needs the insider's g; run it on honest-time paths")
        return np.arange(self.n_steps)[None, :] >= self.g_index[:, None]

    def drawdown(self) -> np.ndarray:
        """``(S - X) / S`` at left endpoints."""
        return 1.0 - self.X[:, : self.n_steps] / self.S[:, : self.n_steps]


Rule = Callable[[StrategyContext, Mapping[str, float]], np.ndarray]


def _flat(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    return np.zeros((ctx.X.shape[0], ctx.n_steps))


def _buy_and_hold(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    return np.full((ctx.X.shape[0], ctx.n_steps), float(p.get("units", 1.0)))


def _short_after_g(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    return -float(p.get("units", 1.0)) * ctx.after_g()


def _buy_after_g(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    return float(p.get("units", 1.0)) * ctx.after_g()


def _long_until_g(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    return float(p.get("units", 1.0)) * ~ctx.after_g()


def _threshold_drawdown(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    # buy the dip: hold while the price is at least `level` below its running max
    return float(p.get("units", 1.0)) * (ctx.drawdown() >= float(p.get("level", 0.1)))


def _threshold_near_max(ctx: StrategyContext, p: Mapping[str, float]) -> np.ndarray:
    return float(p.get("units", 1.0)) * (ctx.drawdown() <= float(p.get("level", 0.02)))


BUILTINS: dict[str, tuple[Rule, bool, frozenset]] = {
    # name: (rule, can go short, accepted parameters)
    "flat": (_flat, False, frozenset()),
    "buy_and_hold": (_buy_and_hold, False, frozenset({"units"})),
    "short_after_g": (_short_after_g, True, frozenset({"units"})),
    "buy_after_g": (_buy_after_g, False, frozenset({"units"})),
    "long_until_g": (_long_until_g, False, frozenset({"units"})),
    "threshold_drawdown": (_threshold_drawdown, False, frozenset({"units", "level"})),
    "threshold_near_max": (_threshold_near_max, False, frozenset({"units", "level"})),
}

LONG_ONLY_AUDIT_SET = (
    ("buy_and_hold", {}),
    ("buy_after_g", {}),
    ("long_until_g", {}),
    ("threshold_drawdown", {"level": 0.1}),
    ("threshold_near_max", {"level": 0.02}),
)


@dataclass
class StrategySpec:
    """A named position rule, its long-only flag and initial wealth ``v0``."""

    name: str
    rule: Rule
    long_only: bool = True
    v0: float = 1.0
    params: dict[str, float] = field(default_factory=dict)

    def positions(self, ctx: StrategyContext) -> np.ndarray:
        phi = np.asarray(self.rule(ctx, self.params), dtype=float)
        if phi.shape != (ctx.X.shape[0], ctx.n_steps):
            raise ValueError(f"rule {self.name!r} returned shape {phi.shape}")
        if self.long_only and (phi < 0).any():
            raise ConfigurationError(f"long-only strategy {self.name!r} produced a short position")
        return phi


def builtin(name: str, *, long_only: bool | None = None, v0: float = 1.0, **params: float) -> StrategySpec:
    """Strategy for a named built-in; long-only flags are checked before any path is touched."""
    if name not in BUILTINS:
        raise ConfigurationError(f"unknown strategy {name!r}; built-ins are {sorted(BUILTINS)}")
    rule, shorts, accepted = BUILTINS[name]
    unknown = set(params) - accepted
    if unknown:
        raise ConfigurationError(f"strategy {name!r} does not take parameters {sorted(unknown)}")
    units = float(params.get("units", 1.0))
    goes_short = shorts and units > 0 or (not shorts and units < 0)
    if long_only is None:
        long_only = not goes_short
    if long_only and goes_short:
        raise ConfigurationError(f"strategy {name!r} sells short and cannot be long-only")
    if not math.isfinite(v0):
        raise ConfigurationError("v0 must be finite")
    label = name if not params else name + "(" + ",".join(f"{k}={params[k]:g}" for k in sorted(params)) + ")"
    return StrategySpec(label, rule, long_only, float(v0), {k: float(v) for k, v in params.items()})


def gains(spec: StrategySpec, ctx: StrategyContext) -> np.ndarray:
    """Per-step gains ``phi_i (X_{i+1} - X_i)`` over the trading horizon."""
    phi = spec.positions(ctx)
    dX = np.diff(ctx.X[:, : ctx.n_steps + 1], axis=1)
    return phi * dX


def run_strategy(
    spec: StrategySpec,
    X: ProcessTrack,
    *,
    S: ProcessTrack | None = None,
    g_index: np.ndarray | None = None,
    n_steps: int | None = None,
) -> ProcessTrack:
    """Wealth track on ``[0, t_{n_steps}]`` (default: the whole grid)."""
    x = X.values
    n = x.shape[1] - 1 if n_steps is None else int(n_steps)
    s = S.values if S is not None else np.maximum.accumulate(x, axis=1)
    ctx = StrategyContext(x, s, n, g_index)
    return ProcessTrack.from_increments(f"V[{spec.name}]", gains(spec, ctx), start=spec.v0)


@dataclass
class ArbitrageReport:
    """Terminal gain statistics ``V_T - v0`` and the arbitrage-evidence flag."""

    strategy: str
    v0: float
    min_gain: float
    mean_gain: float
    std_error: float
    fraction_positive: float
    n_paths: int
    tolerance: float = 1e-12
    weighted_mean: float | None = None
    weighted_std_error: float | None = None

    @property
    def nonnegative(self) -> bool:
        return bool(self.min_gain >= -self.tolerance)

    @property
    def significant(self) -> bool:
        return bool(self.mean_gain > 3.0 * self.std_error)

    @property
    def arbitrage_evidence(self) -> bool:
        return self.nonnegative and self.significant

    @property
    def supermartingale_ok(self) -> bool | None:
        """Weighted mean of ``V_T`` at most ``v0 + 3 SE`` (``None`` without weights)."""
        if self.weighted_mean is None:
            return None
        return bool(self.weighted_mean <= self.v0 + 3.0 * self.weighted_std_error)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "v0": self.v0,
            "min_gain": self.min_gain,
            "mean_gain": self.mean_gain,
            "std_error": self.std_error,
            "fraction_positive": self.fraction_positive,
            "n_paths": self.n_paths,
            "tolerance": self.tolerance,
            "arbitrage_evidence": self.arbitrage_evidence,
            "weighted_terminal_wealth": self.weighted_mean,
            "weighted_std_error": self.weighted_std_error,
            "supermartingale_ok": self.supermartingale_ok,
        }


def arbitrage_report(
    name: str,
    gain_T: np.ndarray,
    v0: float,
    *,
    weights: np.ndarray | None = None,
    tolerance: float = 1e-12,
) -> ArbitrageReport:
    g = np.asarray(gain_T, dtype=float)
    rep = ArbitrageReport(
        strategy=name,
        v0=v0,
        min_gain=float(g.min()),
        mean_gain=float(path_mean(g)),
        std_error=float(path_std_error(g)),
        fraction_positive=float(np.mean(g > tolerance)),
        n_paths=g.shape[0],
        tolerance=tolerance,
    )
    if weights is not None:
        est = weighted_expectation(v0 + g, weights)
        rep.weighted_mean, rep.weighted_std_error = float(est.value), float(est.std_error)
    return rep


def honest_context(paths) -> StrategyContext:
    """Context over ``[0, T]`` for honest-time paths (insider knows ``g``)."""
    return StrategyContext(paths["X"].values, paths["S"].values, paths.T_index, paths.g_index)


def terminal_gains(specs: list[StrategySpec], ctx: StrategyContext) -> dict[str, np.ndarray]:
    """``V_T - v0`` per path for each strategy (per-path output for chunked runs)."""
    return {s.name: gains(s, ctx).sum(axis=1) for s in specs}


def insider_short_audit(paths, tolerance: float = 1e-12) -> ArbitrageReport:
    """The short-after-``g`` strategy: payoff ``X_{g ^ T} - X_T``."""
    spec = builtin("short_after_g", long_only=False)
    g = terminal_gains([spec], honest_context(paths))[spec.name]
    return arbitrage_report(spec.name, g, spec.v0, tolerance=tolerance)


@dataclass
class LongOnlyAudit:
    reports: list[ArbitrageReport]

    @property
    def contradictions(self) -> list[str]:
        """Long-only strategies that show arbitrage evidence under ``P``."""
        return [r.strategy for r in self.reports if r.arbitrage_evidence]

    @property
    def supermartingale_violations(self) -> list[str]:
        return [r.strategy for r in self.reports if r.supermartingale_ok is False]

    @property
    def passed(self) -> bool:
        return not self.contradictions and not self.supermartingale_violations

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "contradictions": self.contradictions,
            "supermartingale_violations": self.supermartingale_violations,
            "strategies": [r.to_dict() for r in self.reports],
        }


def long_only_audit_from_gains(
    specs: list[StrategySpec],
    gains_T: Mapping[str, np.ndarray],
    qs_weights: np.ndarray,
    tolerance: float = 1e-12,
) -> LongOnlyAudit:
    for s in specs:
        if not s.long_only:
            raise ConfigurationError(f"strategy {s.name!r} in the long-only audit is not long-only")
    return LongOnlyAudit(
        [arbitrage_report(s.name, gains_T[s.name], s.v0, weights=qs_weights, tolerance=tolerance) for s in specs]
    )


def long_only_audit(
    specs: list[StrategySpec],
    paths,
    qs_weights: np.ndarray,
    tolerance: float = 1e-12,
) -> LongOnlyAudit:
    """P-statistics and ``Q^S``-weighted terminal wealth of each long-only strategy."""
    for s in specs:
        if not s.long_only:
            raise ConfigurationError(f"strategy {s.name!r} in the long-only audit is not long-only")
    return long_only_audit_from_gains(specs, terminal_gains(specs, honest_context(paths)), qs_weights, tolerance)


def audit_set() -> list[StrategySpec]:
    return [builtin(name, **params) for name, params in LONG_ONLY_AUDIT_SET]
