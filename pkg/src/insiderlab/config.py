"""Run configuration: one scenario, engine settings, analyses and outputs.

Configs are JSON.  Unknown keys are rejected, and every error found is
reported at once rather than only the first one.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .density_lab import DensityLabScenario
from .engine import TimeGrid
from .errors import ConfigurationError
from .factorization import DEFAULT_SCHEDULES, FactorizationScenario
from .honest_time import HonestTimeScenario

HONEST_ANALYSES = ("qs_density", "supermartingale", "short_audit", "long_only_audit", "drift_energy", "entropy", "what_test")
LAB_ANALYSES = ("defects", "tau", "null_projection", "immersion")
FACTOR_ANALYSES = ("orthogonal_product", "regime_switch")
ALL_ANALYSES = HONEST_ANALYSES + LAB_ANALYSES + FACTOR_ANALYSES


class ConfigError(ConfigurationError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class HonestTimeBlock(_Strict):
    sigma: float = Field(0.3, gt=0, description="sigma must be > 0")
    T: float = Field(1.0, gt=0)
    T_sim: Optional[float] = None
    trunc_eps: float = 0.05
    floor_eps: float = Field(1e-6, gt=0)
    tail_mode: Literal["resolve", "truncate"] = "resolve"

    @field_validator("trunc_eps")
    @classmethod
    def _trunc(cls, v: float) -> float:
        if not (0 < v < 1):
            raise ValueError("trunc_eps must lie in (0,1)")
        return v

    @model_validator(mode="after")
    def _horizons(self) -> "HonestTimeBlock":
        if self.T_sim is not None and self.T > self.T_sim:
            raise ValueError(f"honest_time requires T <= T_sim (T={self.T}, T_sim={self.T_sim})")
        return self

    def build(self) -> HonestTimeScenario:
        return HonestTimeScenario(self.sigma, self.T, self.T_sim, self.trunc_eps, self.floor_eps, self.tail_mode)

    @property
    def horizon(self) -> float:
        return self.T_sim if self.T_sim is not None else self.T


class DensityLabBlock(_Strict):
    variant: Literal["absorbing", "stopped"] = "absorbing"
    T: float = Field(1.0, gt=0)
    a: Optional[float] = None
    x0: float = 10.0
    bridge: bool = True
    scheme: Literal["inverse", "log-euler"] = "inverse"

    @model_validator(mode="after")
    def _barrier(self) -> "DensityLabBlock":
        if self.variant == "stopped" and (self.a is None or not (0 < self.a < 1)):
            raise ValueError(f"density_lab stopped variant requires 0 < a < 1, got a={self.a}")
        if self.variant == "absorbing" and self.a is not None:
            raise ValueError("density_lab barrier a is only used by the stopped variant")
        return self

    def build(self) -> DensityLabScenario:
        return DensityLabScenario(self.variant, self.T, self.a, self.x0, self.bridge)

    @property
    def horizon(self) -> float:
        return self.T


class FactorizationBlock(_Strict):
    mode: Literal["independent_drivers", "regime_switch"] = "independent_drivers"
    sigma_u: float = Field(0.2, ge=0)
    sigma_z: float = Field(0.2, ge=0)
    sigma: float = Field(0.2, ge=0)
    T: float = Field(1.0, gt=0)
    schedules: list[list[float]] = Field(default_factory=lambda: [list(s) for s in DEFAULT_SCHEDULES])

    @model_validator(mode="after")
    def _schedules(self) -> "FactorizationBlock":
        for s in self.schedules:
            if any(not (0 < t < self.T) for t in s) or any(b <= a for a, b in zip(s, s[1:])):
                raise ValueError(f"factorization switch times must be increasing and inside (0, T), got {s}")
        return self

    def build(self) -> FactorizationScenario:
        return FactorizationScenario(self.mode, self.sigma_u, self.sigma_z, self.sigma, self.T, tuple(tuple(s) for s in self.schedules))

    @property
    def horizon(self) -> float:
        return self.T


class ScenarioBlock(_Strict):
    honest_time: Optional[HonestTimeBlock] = None
    density_lab: Optional[DensityLabBlock] = None
    factorization: Optional[FactorizationBlock] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "ScenarioBlock":
        given = [k for k in ("honest_time", "density_lab", "factorization") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one scenario block is required, got {given or 'none'}")
        return self

    @property
    def kind(self) -> str:
        return next(k for k in ("honest_time", "density_lab", "factorization") if getattr(self, k) is not None)

    @property
    def block(self):
        return getattr(self, self.kind)


class EngineBlock(_Strict):
    n_paths: int = Field(100_000, ge=2)
    n_steps: int = Field(4096, ge=2)
    seed: int = Field(42, ge=0, le=2**64 - 1)
    antithetic: bool = False
    threads: int = Field(1, ge=1)
    chunk_size: int = Field(2048, ge=2)

    @field_validator("chunk_size")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("chunk_size must be even (antithetic pairs never straddle chunks)")
        return v


class StrategyEntry(_Strict):
    name: str
    params: dict[str, float] = Field(default_factory=dict)


class AnalysisBlock(_Strict):
    run: Optional[list[str]] = None
    c_grid: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    delta_list: Optional[list[float]] = None
    checkpoints: Optional[list[float]] = None
    strategies: Optional[list[StrategyEntry]] = None
    energy_resolution: float = Field(1.0, ge=0)
    what_window: int = Field(10, ge=1)
    n_buckets: int = Field(8, ge=1)
    floor_sensitivity: list[float] = Field(default_factory=lambda: [1e-4, 1e-6, 1e-8])
    richardson: bool = True

    @field_validator("run")
    @classmethod
    def _known(cls, v: Optional[list[str]]) -> Optional[list[str]]:
        if v is not None:
            bad = [a for a in v if a not in ALL_ANALYSES]
            if bad:
                raise ValueError(f"unknown analyses {bad}; choose from {list(ALL_ANALYSES)}")
        return v

    @field_validator("c_grid")
    @classmethod
    def _c_grid(cls, v: list[float]) -> list[float]:
        if 0.0 not in v:
            raise ValueError("c_grid must contain 0 (entropy_objective_honest precondition)")
        if any(c < 0 for c in v):
            raise ValueError("c_grid entries must be nonnegative")
        return v

    @field_validator("delta_list")
    @classmethod
    def _deltas(cls, v: Optional[list[float]]) -> Optional[list[float]]:
        if v is not None:
            if any(d <= 0 for d in v):
                raise ValueError("delta_list entries must be positive (information_drift_energy precondition)")
            if any(b >= a for a, b in zip(v, v[1:])):
                raise ValueError("delta_list must be decreasing (information_drift_energy precondition)")
        return v

    @field_validator("floor_sensitivity")
    @classmethod
    def _floors(cls, v: list[float]) -> list[float]:
        if any(f <= 0 for f in v):
            raise ValueError("floor_sensitivity entries must be > 0")
        return v


class OutputBlock(_Strict):
    directory: str = "insiderlab-out"
    formats: list[Literal["json", "csv"]] = Field(default_factory=lambda: ["json"])
    dump_paths: int = Field(0, ge=0)


class RunConfig(_Strict):
    scenario: ScenarioBlock
    engine: EngineBlock = Field(default_factory=EngineBlock)
    analysis: AnalysisBlock = Field(default_factory=AnalysisBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @model_validator(mode="after")
    def _grid(self) -> "RunConfig":
        grid = self.grid
        errors = []
        T = self.scenario.block.T
        if not _on_grid(grid, T):
            errors.append(f"scenario T={T} is not a grid node (horizon {grid.horizon}, {grid.n_steps} steps)")
        for t in self.analysis.checkpoints or []:
            if not (0 <= t <= T) or not _on_grid(grid, t):
                errors.append(f"checkpoint {t} must be a grid node in [0, T] (supermartingale_monotonicity precondition)")
        if self.scenario.kind == "density_lab" and self.analysis.richardson and grid.n_steps % 2:
            errors.append("richardson comparison needs an even n_steps")
        if errors:
            raise ValueError("; ".join(errors))
        return self

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(float(self.scenario.block.horizon), self.engine.n_steps)

    def allowed_analyses(self) -> tuple[str, ...]:
        kind = self.scenario.kind
        if kind == "honest_time":
            return HONEST_ANALYSES
        if kind == "density_lab":
            return LAB_ANALYSES
        if self.scenario.factorization.mode == "independent_drivers":
            return ("orthogonal_product",)
        return ("regime_switch",)

    def analyses(self, requested: list[str] | None = None) -> list[str]:
        """Analyses to run: ``requested``, else the configured list, else all that apply."""
        allowed = self.allowed_analyses()
        if requested is not None:
            chosen = list(requested)
        elif self.analysis.run is not None:
            chosen = list(self.analysis.run)
        else:
            chosen = list(allowed)
        bad = [a for a in chosen if a not in allowed]
        if bad:
            raise ConfigError(
                [f"analysis.run: {bad} do not apply to this {self.scenario.kind} scenario; choose from {list(allowed)}"]
            )
        return chosen

    def deltas(self) -> list[float]:
        T = self.scenario.block.T
        return self.analysis.delta_list or [T * 2.0**-k for k in range(3, 10)]

    def checkpoint_times(self) -> list[float]:
        T = self.scenario.block.T
        return self.analysis.checkpoints or [T * k / 4 for k in range(5)]

    def with_overrides(self, **engine_overrides) -> "RunConfig":
        eng = self.engine.model_dump()
        eng.update({k: v for k, v in engine_overrides.items() if v is not None})
        data = self.model_dump()
        data["engine"] = eng
        return validate_config(data)

    def with_output(self, directory: str | None = None, formats: list[str] | None = None) -> "RunConfig":
        data = self.model_dump()
        if directory is not None:
            data["output"]["directory"] = directory
        if formats is not None:
            data["output"]["formats"] = formats
        return validate_config(data)


def _on_grid(grid: TimeGrid, t: float) -> bool:
    x = t / grid.dt
    return abs(x - round(x)) <= 1e-9 * max(1.0, x)


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        parts = [str(p) for p in e["loc"]]
        if len(parts) >= 3 and parts[0] == "scenario" and e["type"] != "extra_forbidden":
            msg += f" [{parts[1]} precondition]"
        out.append(f"{loc}: {msg}" if loc else msg)
    return out


def validate_config(data: dict) -> RunConfig:
    """Validate a config mapping; raises :class:`ConfigError` with every problem found."""
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    # module preconditions, checked once more by the scenario types themselves
    try:
        cfg.scenario.block.build()
    except ConfigurationError as exc:
        raise ConfigError([f"scenario.{cfg.scenario.kind}: {exc}"]) from None
    cfg.analyses()
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    """Read and validate a JSON config file.

    Raises ``OSError`` when the file cannot be read and :class:`ConfigError`
    when it is malformed or invalid.
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return validate_config(data)


def emit_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(), indent=2, sort_keys=True)


def default_config(kind: str, **scenario_params) -> RunConfig:
    if kind not in ("honest_time", "density_lab", "factorization"):
        raise ConfigError([f"unknown scenario {kind!r}"])
    return validate_config({"scenario": {kind: scenario_params}})

