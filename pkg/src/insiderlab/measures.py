"""Changes of measure on a simulated ensemble.

Every expectation under a new measure Q is computed on the base sample as
``E_P[rho * value]`` with ``rho = dQ/dP`` per path.  One ensemble can then be
read under many measures without re-simulating.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .engine import ProcessTrack, path_mean, path_std_error

CONSISTENT = "consistent-with-martingale"
STRICT_LOCAL = "strict-local-martingale"
INCONCLUSIVE = "inconclusive"


@dataclass
class Estimate:
    value: float
    std_error: float
    n: int
    warning: str | None = None

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.value - 1.96 * self.std_error, self.value + 1.96 * self.std_error)

    def within(self, target: float, n_se: float = 3.0) -> bool:
        return bool(abs(self.value - target) <= n_se * self.std_error)

    def to_dict(self) -> dict:
        d = {"value": self.value, "std_error": self.std_error, "ci95": list(self.ci95), "n": self.n}
        if self.warning:
            d["warning"] = self.warning
        return d


def mean_estimate(values: np.ndarray) -> Estimate:
    v = np.asarray(values, dtype=float)
    return Estimate(float(path_mean(v)), float(path_std_error(v)), int(v.shape[0]))


def _as_weights(density: np.ndarray | None, n: int) -> np.ndarray | None:
    if density is None:
        return None
    w = np.asarray(density, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"expected {n} per-path weights, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    return w


def weighted_expectation(values: np.ndarray, density: np.ndarray, normalized: bool = False) -> Estimate:
    """``E_Q[values]`` from base-measure samples with ``dQ/dP = density``.

    The default estimator is ``sum(w v) / n``.  With ``normalized`` the
    self-normalised ratio ``sum(w v) / sum(w)`` is returned with a
    delta-method standard error.  A warning is attached when the density's
    sample mean is more than 5 standard errors away from 1.
    """
    v = np.asarray(values, dtype=float)
    w = _as_weights(density, v.shape[0])
    wm = mean_estimate(w)
    warning = None
    if not wm.within(1.0, 5.0):
        warning = f"density mean {wm.value:.6g} is {abs(wm.value - 1) / max(wm.std_error, 1e-300):.1f} SE from 1"
    if not normalized:
        est = mean_estimate(w * v)
        est.warning = warning
        return est
    ratio = path_mean(w * v) / wm.value
    resid = w * (v - ratio)
    se = path_std_error(resid) / wm.value
    return Estimate(float(ratio), float(se), int(v.shape[0]), warning)


@dataclass
class DefectReport:
    """``1 - E[density_T]`` and the martingale / strict local martingale verdict."""

    mean_estimate: float
    std_error: float
    discretization_margin: float
    verdict: str
    n_paths: int
    second_moment: float = math.nan

    @property
    def defect(self) -> float:
        return 1.0 - self.mean_estimate

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean_estimate - 1.96 * self.std_error, self.mean_estimate + 1.96 * self.std_error)

    @property
    def threshold(self) -> float:
        return max(3.0 * self.std_error, self.discretization_margin)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(defect=self.defect, ci95=list(self.ci95), threshold=self.threshold)
        return d


def defect_verdict(mean: float, se: float, margin: float) -> str:
    defect = 1.0 - mean
    thr = max(3.0 * se, margin)
    if defect > thr:
        return STRICT_LOCAL
    if abs(defect) <= thr:
        return CONSISTENT
    return INCONCLUSIVE


def martingale_defect(
    density_T: np.ndarray,
    base_weights: np.ndarray | None = None,
    *,
    coarse: tuple[np.ndarray, np.ndarray | None] | None = None,
    order: float = 1.0,
) -> DefectReport:
    """Estimate ``E[density_T]`` (under ``base_weights`` if given) and classify.

    ``coarse`` holds the same quantities computed at half the step count on
    the same Brownian paths.  The Richardson margin is
    ``|fine - coarse| / (2**order - 1)``, the estimated error of the fine run
    for a scheme of weak order ``order``.
    """
    rho = np.asarray(density_T, dtype=float)
    if (rho < 0).any():
        raise ValueError("density_T must be nonnegative")
    w = _as_weights(base_weights, rho.shape[0])
    vals = rho if w is None else w * rho
    est = mean_estimate(vals)
    margin = 0.0
    if coarse is not None:
        c_rho, c_w = coarse
        c_vals = np.asarray(c_rho, float) if c_w is None else np.asarray(c_w, float) * np.asarray(c_rho, float)
        margin = float(abs(est.value - path_mean(c_vals)) / (2.0**order - 1.0))
    second = path_mean(rho * rho if w is None else w * rho * rho)
    return DefectReport(
        mean_estimate=est.value,
        std_error=est.std_error,
        discretization_margin=margin,
        verdict=defect_verdict(est.value, est.std_error, margin),
        n_paths=rho.shape[0],
        second_moment=float(second),
    )


@dataclass
class EntropyReport:
    """Relative entropy ``H(Q|P)`` and, when an energy is supplied, the objective
    ``H(Q|P) - E_Q[energy]``."""

    H_estimate: float
    std_error: float
    H_raw: float
    n_paths: int
    equivalent: bool = True
    energy_term: float | None = None
    energy_std_error: float | None = None
    objective: float | None = None
    objective_std_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def relative_entropy(
    density_T: np.ndarray,
    base_weights: np.ndarray | None = None,
    *,
    energy: np.ndarray | None = None,
) -> EntropyReport:
    """``H(Q|P) = E_P[rho log rho]`` estimated on base-measure samples.

    ``energy`` is a per-path random variable whose Q-expectation is
    subtracted to form the objective; its standard error is computed jointly
    with the entropy term on the same paths.  Reported ``H_estimate`` is
    clamped below at ``-3 SE``.
    """
    rho = np.asarray(density_T, dtype=float)
    if not np.isfinite(rho).all() or (rho < 0).any():
        raise ValueError("density_T must be finite and nonnegative")
    w = _as_weights(base_weights, rho.shape[0])
    positive = rho > 0
    log_rho = np.zeros_like(rho)
    np.log(rho, out=log_rho, where=positive)
    h_path = rho * log_rho
    if w is not None:
        h_path = w * h_path
    # rho = 0 carries Q-mass zero: 0 log 0 = 0, but Q and P are then not equivalent
    equivalent = bool(positive.all() if w is None else positive[w > 0].all())
    h = mean_estimate(h_path)
    rep = EntropyReport(
        H_estimate=max(h.value, -3.0 * h.std_error),
        std_error=h.std_error,
        H_raw=h.value,
        n_paths=rho.shape[0],
        equivalent=equivalent,
    )
    if energy is not None:
        e_path = rho * np.asarray(energy, dtype=float)
        if w is not None:
            e_path = w * e_path
        e = mean_estimate(e_path)
        obj = mean_estimate(h_path - e_path)
        rep.energy_term = e.value
        rep.energy_std_error = e.std_error
        rep.objective = obj.value
        rep.objective_std_error = obj.std_error
    return rep


@dataclass
class MonotoneReport:
    checkpoints: list[float]
    means: list[float]
    std_errors: list[float]
    step_changes: list[float]
    step_std_errors: list[float]
    flags: list[bool] = field(default_factory=list)

    @property
    def nonincreasing(self) -> bool:
        return not any(self.flags)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nonincreasing"] = self.nonincreasing
        return d


def supermartingale_monotonicity(
    X: ProcessTrack | np.ndarray,
    density_T: np.ndarray | None,
    checkpoints: Sequence[int],
    times: Sequence[float] | None = None,
    gate: np.ndarray | None = None,
) -> MonotoneReport:
    """Weighted means of ``X`` at checkpoint nodes; flag increases beyond 3 SE.

    ``X`` is either a track (``checkpoints`` are node indices) or an array
    already sampled at the checkpoints, one column each.  Increases are
    judged on paired per-path differences between consecutive checkpoints.
    ``gate`` (one column per step between checkpoints) multiplies each
    difference by an indicator known at the earlier checkpoint; a
    supermartingale has nonpositive gated steps as well.
    """
    if isinstance(X, ProcessTrack):
        cols = X.values[:, list(checkpoints)]
    else:
        cols = np.asarray(X, dtype=float)
        if cols.shape[1] != len(checkpoints):
            raise ValueError("sampled X must have one column per checkpoint")
    n = cols.shape[0]
    w = _as_weights(density_T, n)
    wc = cols if w is None else cols * w[:, None]
    means = [path_mean(wc[:, k]) for k in range(wc.shape[1])]
    ses = [path_std_error(wc[:, k]) for k in range(wc.shape[1])]
    steps, step_ses, flags = [], [], []
    for k in range(wc.shape[1] - 1):
        d = wc[:, k + 1] - wc[:, k]
        if gate is not None:
            d = d * gate[:, k]
        m, s = path_mean(d), path_std_error(d)
        steps.append(m)
        step_ses.append(s)
        flags.append(bool(m > 3.0 * s))
    labels = list(times) if times is not None else [float(c) for c in checkpoints]
    return MonotoneReport(labels, [float(m) for m in means], [float(x) for x in ses], [float(x) for x in steps], [float(x) for x in step_ses], flags)
