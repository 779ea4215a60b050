"""Discrete stochastic calculus on a uniform grid.

Integrands are sampled at left endpoints, which is what makes them
predictable; sampling at the right endpoint would add a bracket term to the
drift without any warning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .engine import ProcessTrack, path_mean, path_std_error

T_THRESHOLD = 4.0

TrackLike = Union[ProcessTrack, np.ndarray]


def _values(x: TrackLike) -> np.ndarray:
    return x.values if isinstance(x, ProcessTrack) else np.asarray(x, dtype=float)


def _increments(x: TrackLike) -> np.ndarray:
    return x.diffs() if isinstance(x, ProcessTrack) else np.diff(np.asarray(x, dtype=float), axis=1)


def _label(x: TrackLike, default: str) -> str:
    return x.label if isinstance(x, ProcessTrack) else default


def ito_integral(integrand: TrackLike, driver: TrackLike, label: str | None = None) -> ProcessTrack:
    """``(int H dY)_{t_i} = sum_{j<i} H_{t_j} (Y_{t_{j+1}} - Y_{t_j})``."""
    h = _values(integrand)
    dy = _increments(driver)
    if h.shape != (dy.shape[0], dy.shape[1] + 1):
        raise ValueError(f"shape mismatch: integrand {h.shape} vs driver {_values(driver).shape}")
    name = label or f"int {_label(integrand, 'H')} d{_label(driver, 'Y')}"
    return ProcessTrack.from_increments(name, h[:, :-1] * dy)


def quadratic_variation(track: TrackLike, label: str | None = None) -> ProcessTrack:
    """Realised quadratic variation ``[Y]_{t_i} = sum_{j<i} (dY_j)^2``."""
    dy = _increments(track)
    return ProcessTrack.from_increments(label or f"[{_label(track, 'Y')}]", dy * dy)


def stochastic_exponential(Y: TrackLike, log: bool = False, label: str | None = None) -> ProcessTrack:
    """Doleans-Dade exponential of a continuous track, ``exp(Y - [Y]/2)``.

    Computed in log space; ``log=True`` returns ``Y - [Y]/2`` itself, which
    stays finite when the exponential would overflow.
    """
    y = _values(Y)
    if np.any(y[:, 0] != 0.0):
        raise ValueError("stochastic_exponential needs Y_0 = 0")
    dy = _increments(Y)
    log_inc = dy - 0.5 * dy * dy
    name = label or f"E({_label(Y, 'Y')})"
    log_track = ProcessTrack.from_increments(("log " + name) if log else name, log_inc)
    if log:
        return log_track
    with np.errstate(over="raise"):
        return ProcessTrack(name, np.exp(log_track.values))


@dataclass
class FunctionalStat:
    functional: str
    bucket: tuple[float, float]
    estimate: float
    std_error: float
    t_stat: float


@dataclass
class OrthogonalityReport:
    """Bucketed estimates of ``E[w dM f]`` with t-statistics."""

    stats: list[FunctionalStat] = field(default_factory=list)
    threshold: float = T_THRESHOLD
    n_paths: int = 0

    @property
    def max_abs_t(self) -> float:
        return float(max((abs(s.t_stat) for s in self.stats), default=0.0))

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_t <= self.threshold)

    @property
    def n_tests(self) -> int:
        return len(self.stats)

    @property
    def note(self) -> str:
        # Bonferroni reading of the fixed threshold
        from scipy.stats import norm

        fp = min(1.0, 2.0 * norm.sf(self.threshold) * max(self.n_tests, 1))
        return (
            f"failure iff max|t| > {self.threshold:g}; {self.n_tests} tests, "
            f"Bonferroni false-positive bound {fp:.2e}"
        )

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_t": self.max_abs_t,
            "threshold": self.threshold,
            "n_paths": self.n_paths,
            "note": self.note,
            "stats": [
                {
                    "functional": s.functional,
                    "bucket": list(s.bucket),
                    "estimate": s.estimate,
                    "std_error": s.std_error,
                    "t_stat": s.t_stat,
                }
                for s in self.stats
            ],
        }


def bucket_edges(n_steps: int, n_buckets: int) -> np.ndarray:
    return np.linspace(0, n_steps, min(n_buckets, n_steps) + 1).round().astype(int)


def increment_sums(
    M: TrackLike,
    functionals: Sequence[TrackLike],
    *,
    mask: np.ndarray | None = None,
    n_buckets: int = 8,
) -> np.ndarray:
    """Per-path sums of ``f * dM`` over each time bucket, shape ``(n_paths, n_f, n_buckets)``.

    This is the map half of :func:`martingale_increment_test`; chunked runs
    concatenate these sums over paths and reduce them with
    :func:`orthogonality_report`.
    """
    dm = _increments(M)
    n_paths, n_steps = dm.shape
    if mask is not None and mask.shape != dm.shape:
        raise ValueError("mask must have shape n_paths x n_steps")
    edges = bucket_edges(n_steps, n_buckets)
    out = np.empty((n_paths, len(functionals), len(edges) - 1))
    for k, f in enumerate(functionals):
        fv = _values(f)
        if fv.shape != (n_paths, n_steps + 1):
            raise ValueError(f"functional {k} has shape {fv.shape}, expected {(n_paths, n_steps + 1)}")
        prod = fv[:, :-1] * dm
        if mask is not None:
            prod = np.where(mask, prod, 0.0)
        for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            out[:, k, b] = prod[:, lo:hi].sum(axis=1)
    return out


def orthogonality_report(
    sums: np.ndarray,
    names: Sequence[str],
    bucket_times: Sequence[tuple[float, float]],
    weights: np.ndarray | None = None,
    threshold: float = T_THRESHOLD,
) -> OrthogonalityReport:
    """Reduce per-path bucket sums (optionally density-weighted) to t-statistics."""
    n_paths = sums.shape[0]
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n_paths,) or not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("weights must be finite, nonnegative and one per path")
        sums = sums * w[:, None, None]
    report = OrthogonalityReport(threshold=threshold, n_paths=n_paths)
    for k, name in enumerate(names):
        for b, bucket in enumerate(bucket_times):
            s = sums[:, k, b]
            est = float(path_mean(s))
            se = float(path_std_error(s))
            t = est / se if se > 0 else 0.0
            report.stats.append(FunctionalStat(name, tuple(map(float, bucket)), est, se, t))
    return report


def martingale_increment_test(
    M: TrackLike,
    functionals: Mapping[str, TrackLike] | Sequence[TrackLike],
    weights: TrackLike | None = None,
    *,
    mask: np.ndarray | None = None,
    n_buckets: int = 8,
    times: np.ndarray | None = None,
    threshold: float = T_THRESHOLD,
) -> OrthogonalityReport:
    """Test ``E[w * dM * f] = 0`` per functional and time bucket.

    ``functionals`` must be adapted; this cannot be checked and is the
    caller's contract.  They are read at left endpoints.  ``weights`` are
    per-path terminal densities (a track contributes its terminal value).
    ``mask`` (shape ``n_paths x n_steps``) selects the increments under test.
    A bucket fails when its ``|t| > threshold``.
    """
    if isinstance(functionals, Mapping):
        names, tracks = list(functionals.keys()), list(functionals.values())
    else:
        tracks = list(functionals)
        names = [_label(f, f"f{k}") for k, f in enumerate(tracks)]
    sums = increment_sums(M, tracks, mask=mask, n_buckets=n_buckets)
    n_steps = _increments(M).shape[1]
    if times is None:
        times = np.arange(n_steps + 1, dtype=float)
    edges = bucket_edges(n_steps, n_buckets)
    buckets = [(times[lo], times[hi]) for lo, hi in zip(edges[:-1], edges[1:])]
    w = None
    if weights is not None:
        w = _values(weights)[:, -1] if isinstance(weights, ProcessTrack) or np.ndim(weights) == 2 else np.asarray(weights, float)
    return orthogonality_report(sums, names, buckets, w, threshold)
