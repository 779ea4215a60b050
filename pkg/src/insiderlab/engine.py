"""Time grids, Brownian ensembles and deterministic path-parallel execution.

Random numbers come from counter-based Philox streams.  Paths are grouped in
fixed blocks of ``PATH_BLOCK`` rows and every block is keyed by
``(seed, stream, block index)``, so the increments of path ``p`` never depend
on how many paths are requested, on the chunking, or on the number of worker
threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError

PATH_BLOCK = 256
DEFAULT_CHUNK = 2048

# Independent substreams.  A new consumer of randomness gets a new id.
STREAM_W = 0
STREAM_SIGN = 1
STREAM_TAIL = 2
STREAM_W2 = 3
STREAM_BRIDGE = 4

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * dt`` on ``[0, horizon]``."""

    horizon: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        # i * dt rather than cumulative addition so the last node is exact
        return np.arange(self.n_nodes) * self.dt if self.n_steps else np.zeros(1)

    def index_of(self, t: float) -> int:
        """Node index of time ``t``; ``t`` must sit on the grid."""
        x = t / self.dt
        i = int(round(x))
        if not (0 <= i <= self.n_steps) or abs(x - i) > 1e-9 * max(1.0, x):
            raise ConfigurationError(
                f"time {t} is not a node of the grid (horizon={self.horizon}, "
                f"n_steps={self.n_steps})"
            )
        return i

    def coarsen(self, factor: int = 2) -> "TimeGrid":
        if factor < 1 or self.n_steps % factor:
            raise ConfigurationError(f"cannot coarsen {self.n_steps} steps by {factor}")
        return TimeGrid(self.horizon, self.n_steps // factor)


def build_grid(T_sim: float, n_steps: int) -> TimeGrid:
    if not (isinstance(T_sim, (int, float)) and math.isfinite(T_sim) and T_sim > 0):
        raise ConfigurationError(f"T_sim must be a positive finite time, got {T_sim!r}")
    if isinstance(n_steps, bool) or not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps!r}")
    return TimeGrid(float(T_sim), int(n_steps))


@dataclass
class ProcessTrack:
    """One labelled process sampled on the grid, shape ``(n_paths, n_nodes)``.

    ``increments`` may be carried next to the levels so integrals never have
    to difference large, nearly equal numbers.  ``stop_index`` marks tracks
    that are constant after a per-path node index.
    """

    label: str
    values: np.ndarray
    increments: np.ndarray | None = None
    stop_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"track {self.label!r} must be 2-d, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"track {self.label!r} contains non-finite values")
        if self.increments is not None:
            self.increments = np.asarray(self.increments, dtype=float)
            if self.increments.shape != (self.values.shape[0], self.values.shape[1] - 1):
                raise ValueError(f"increments of {self.label!r} do not match the levels")

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def diffs(self) -> np.ndarray:
        if self.increments is not None:
            return self.increments
        return np.diff(self.values, axis=1)

    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def at(self, index: np.ndarray | int) -> np.ndarray:
        """Per-path value at a (per-path) node index."""
        idx = np.broadcast_to(np.asarray(index), (self.n_paths,))
        return self.values[np.arange(self.n_paths), idx]

    @classmethod
    def from_increments(cls, label: str, increments: np.ndarray, start: float = 0.0) -> "ProcessTrack":
        inc = np.asarray(increments, dtype=float)
        values = np.empty((inc.shape[0], inc.shape[1] + 1))
        values[:, 0] = start
        np.cumsum(inc, axis=1, out=values[:, 1:])
        if start:
            values[:, 1:] += start
        return cls(label, values, increments=inc)


@dataclass
class Ensemble:
    """Brownian paths ``[path_offset, path_offset + n_paths)`` plus derived tracks."""

    grid: TimeGrid
    n_paths: int
    seed: int
    tracks: dict[str, ProcessTrack] = field(default_factory=dict)
    antithetic: bool = False
    pairing: np.ndarray | None = None
    path_offset: int = 0

    def __getitem__(self, label: str) -> ProcessTrack:
        return self.tracks[label]

    @property
    def path_indices(self) -> np.ndarray:
        return np.arange(self.path_offset, self.path_offset + self.n_paths)


def _check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ConfigurationError(f"seed must be an integer, got {seed!r}")
    if not 0 <= int(seed) <= _MASK64:
        raise ConfigurationError("seed must fit in an unsigned 64-bit integer")
    return int(seed)


def _block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, ((stream & 0xFFFF) << 48) | block], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _stream_rows(seed: int, stream: int, start: int, stop: int, n_cols: int, draw) -> np.ndarray:
    out = np.empty((stop - start, n_cols))
    first, last = start // PATH_BLOCK, (stop - 1) // PATH_BLOCK
    for block in range(first, last + 1):
        rows = draw(_block_generator(seed, stream, block), (PATH_BLOCK, n_cols))
        lo = max(start, block * PATH_BLOCK)
        hi = min(stop, (block + 1) * PATH_BLOCK)
        out[lo - start : hi - start] = rows[lo - block * PATH_BLOCK : hi - block * PATH_BLOCK]
    return out


def stream_normals(seed: int, stream: int, start: int, stop: int, n_cols: int) -> np.ndarray:
    """Standard normals for rows ``[start, stop)`` of a keyed substream."""
    if stop <= start:
        return np.empty((0, n_cols))
    return _stream_rows(seed, stream, start, stop, n_cols, lambda g, s: g.standard_normal(s))


def stream_uniforms(seed: int, stream: int, start: int, stop: int, n_cols: int = 1) -> np.ndarray:
    """Uniforms on ``[0, 1)`` for rows ``[start, stop)`` of a keyed substream."""
    if stop <= start:
        return np.empty((0, n_cols))
    return _stream_rows(seed, stream, start, stop, n_cols, lambda g, s: g.random(s))


def brownian_increments(
    grid: TimeGrid,
    start: int,
    stop: int,
    seed: int,
    antithetic: bool = False,
    stream: int = STREAM_W,
) -> np.ndarray:
    """Increments of paths ``[start, stop)``; with ``antithetic`` path 2k+1 mirrors 2k."""
    sd = math.sqrt(grid.dt)
    if not antithetic:
        return stream_normals(seed, stream, start, stop, grid.n_steps) * sd
    base_lo, base_hi = start // 2, (stop - 1) // 2 + 1
    base = stream_normals(seed, stream, base_lo, base_hi, grid.n_steps) * sd
    paths = np.arange(start, stop)
    rows = base[paths // 2 - base_lo]
    rows[paths % 2 == 1] *= -1.0
    return rows


def sample_brownian(
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    antithetic: bool = False,
    *,
    start: int = 0,
    stream: int = STREAM_W,
    label: str = "W",
) -> Ensemble:
    """Brownian ensemble with track ``label`` (default ``"W"``), ``W_0 = 0``."""
    if isinstance(n_paths, bool) or not isinstance(n_paths, (int, np.integer)) or n_paths < 1:
        raise ConfigurationError(f"n_paths must be a positive integer, got {n_paths!r}")
    if start < 0:
        raise ConfigurationError("path offset must be nonnegative")
    seed = _check_seed(seed)
    inc = brownian_increments(grid, start, start + n_paths, seed, antithetic, stream)
    pairing = None
    if antithetic:
        pairing = np.arange(start, start + n_paths) ^ 1
    return Ensemble(
        grid=grid,
        n_paths=int(n_paths),
        seed=seed,
        tracks={label: ProcessTrack.from_increments(label, inc)},
        antithetic=antithetic,
        pairing=pairing,
        path_offset=start,
    )


def chunk_bounds(n_paths: int, chunk_size: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    if chunk_size < 2 or chunk_size % 2:
        raise ConfigurationError("chunk_size must be an even integer >= 2")
    return [(lo, min(lo + chunk_size, n_paths)) for lo in range(0, n_paths, chunk_size)]


def map_paths(
    fn: Callable[[Ensemble], Mapping[str, np.ndarray]],
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    antithetic: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Apply ``fn`` to fixed-size path chunks and concatenate per-path outputs.

    ``fn`` receives a Brownian ensemble for one chunk and must return arrays
    whose leading axis is the chunk's paths.  Chunk boundaries depend only on
    ``chunk_size``, never on ``workers``, so results are bit-identical for any
    thread count.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be positive")
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    seed = _check_seed(seed)
    bounds = chunk_bounds(n_paths, chunk_size)

    def job(b: tuple[int, int]) -> Mapping[str, np.ndarray]:
        lo, hi = b
        out = fn(sample_brownian(grid, hi - lo, seed, antithetic, start=lo))
        # copy so that views (e.g. terminal columns) do not pin whole chunk arrays
        return {k: np.array(v, copy=True) for k, v in out.items()}

    if workers == 1 or len(bounds) == 1:
        parts = [job(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    keys = parts[0].keys()
    return {k: np.concatenate([np.asarray(p[k]) for p in parts], axis=0) for k in keys}


def path_mean(values: np.ndarray) -> np.ndarray | float:
    """Mean over paths (axis 0) with pairwise summation along contiguous rows."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return float(np.add.reduce(np.ascontiguousarray(v)) / v.shape[0])
    flat = np.ascontiguousarray(v.reshape(v.shape[0], -1).T)
    return (np.add.reduce(flat, axis=1) / v.shape[0]).reshape(v.shape[1:])


def path_std_error(values: np.ndarray) -> np.ndarray | float:
    """Standard error of :func:`path_mean` (sample std with ``ddof=1``)."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    if n < 2:
        return np.full(v.shape[1:], np.inf) if v.ndim > 1 else math.inf
    centred = v - path_mean(v)
    var = path_mean(centred * centred) * n / (n - 1)
    return np.sqrt(var / n)
