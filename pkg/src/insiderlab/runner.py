"""Execute a validated :class:`RunConfig` and assemble the run report.

Each scenario has one chunk collector that turns a Brownian chunk into
per-path arrays; reductions run once on the concatenated arrays.  The
numeric ``payload`` of a report therefore depends only on (config, seed),
never on the thread count.  Timings live in ``meta``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import density_lab as dl
from . import engine
from . import factorization as fz
from . import honest_time as ht
from . import strategies as st
from .calculus import increment_sums, orthogonality_report
from .config import RunConfig
from .errors import ConsistencyError
from .measures import STRICT_LOCAL, mean_estimate, supermartingale_monotonicity, weighted_expectation

REPORT_POINTS = 64


def jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become strings so the output stays valid JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return obj


def payload_bytes(report: dict) -> bytes:
    """Canonical serialisation of the numeric payload (used for reproducibility checks)."""
    return json.dumps(report["payload"], sort_keys=True).encode()


@dataclass
class RunResult:
    report: dict
    tracks: dict[str, list] = field(default_factory=dict)
    path_tracks: list[dict] = field(default_factory=list)

    @property
    def failures(self) -> list[str]:
        return self.report["consistency"]["failures"]

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def report_nodes(n_steps: int, horizon_index: int) -> np.ndarray:
    stride = max(1, horizon_index // REPORT_POINTS)
    return np.arange(0, horizon_index + 1, stride)


# ---------------------------------------------------------------- honest time


def _honest_specs(cfg: RunConfig) -> list[st.StrategySpec]:
    if cfg.analysis.strategies is None:
        return st.audit_set()
    return [st.builtin(s.name, **s.params) for s in cfg.analysis.strategies]


def _honest_collector(cfg: RunConfig, analyses: list[str]):
    scenario = cfg.scenario.honest_time.build()
    grid = cfg.grid
    ck = [grid.index_of(t) for t in cfg.checkpoint_times()]
    deltas = cfg.deltas()
    c_grid = cfg.analysis.c_grid
    specs = _honest_specs(cfg) if "long_only_audit" in analyses else []
    T_index = grid.index_of(scenario.T)
    rnodes = report_nodes(grid.n_steps, T_index)

    def fn(ens: engine.Ensemble) -> dict[str, np.ndarray]:
        p = ht.honest_time_from_ensemble(scenario, ens, check_truncation=False)
        out = {
            "qs_T": ht.terminal_density(p),
            "tail": p.tail_bound,
            "beyond": p.beyond.astype(float),
            "stop_time": p.stop_time,
            "X_ck": p["X"].values[:, ck],
            "g_after_ck": (p.g_index[:, None] > np.asarray(ck)[None, :]).astype(float),
            "X_report": p["X"].values[:, rnodes],
            "S_report": p["S"].values[:, rnodes],
            "What_report": p["What"].values[:, rnodes],
        }
        if "short_audit" in analyses or "long_only_audit" in analyses:
            all_specs = specs + [st.builtin("short_after_g")]
            for name, g in st.terminal_gains(all_specs, st.honest_context(p)).items():
                out[f"gain:{name}"] = g
        if "drift_energy" in analyses:
            out["energy"] = ht.drift_energy_per_path(p, deltas, cfg.analysis.energy_resolution)
            out["pre_g_energy"] = ht.pre_g_energy(p)
        if "entropy" in analyses:
            for k, v in ht.entropy_terms_per_path(p, c_grid).items():
                out[f"ent:{k}"] = v
        if "what_test" in analyses:
            out["what_sums"] = _what_sums(p, cfg)
        return out

    return fn


def _what_functionals(p: ht.HonestTimePaths) -> dict[str, np.ndarray]:
    """Insider-adapted test functionals for increments of ``What``."""
    nodes = np.arange(p.grid.n_nodes)[None, :]
    X = p["X"].values
    return {
        "1": np.ones_like(X),
        "W": p["W"].values,
        "1{g<=t}": (nodes >= p.g_index[:, None]).astype(float),
        "X/S": X / p["S"].values,
    }


def _what_sums(p: ht.HonestTimePaths, cfg: RunConfig) -> np.ndarray:
    mask = ht.what_test_mask(p, cfg.analysis.what_window)
    return increment_sums(p["What"], list(_what_functionals(p).values()), mask=mask, n_buckets=cfg.analysis.n_buckets)


def _bucket_times(grid: engine.TimeGrid, n_buckets: int) -> list[tuple[float, float]]:
    from .calculus import bucket_edges

    e = bucket_edges(grid.n_steps, n_buckets)
    t = grid.nodes
    return [(float(t[a]), float(t[b])) for a, b in zip(e[:-1], e[1:])]


def _floor_sensitivity(cfg: RunConfig) -> dict:
    """Floor dependence of ``What`` on the first chunk of paths."""
    base = cfg.scenario.honest_time
    n = min(cfg.engine.n_paths, cfg.engine.chunk_size)
    ens = engine.sample_brownian(cfg.grid, n, cfg.engine.seed, cfg.engine.antithetic)
    deltas = cfg.deltas()
    out = {"n_paths": n, "floors": {}}
    for eps in cfg.analysis.floor_sensitivity:
        sc = ht.HonestTimeScenario(base.sigma, base.T, base.T_sim, base.trunc_eps, eps, base.tail_mode)
        p = ht.honest_time_from_ensemble(sc, ens, check_truncation=False)
        sums = _what_sums(p, cfg)
        rep = orthogonality_report(sums, list(_what_functionals(p)), _bucket_times(cfg.grid, cfg.analysis.n_buckets))
        raw = ht.drift_energy_per_path(p, deltas[-1:], resolution=0.0)[:, 0]
        out["floors"][f"{eps:g}"] = {
            "what_T_mean": mean_estimate(p["What"].at(p.T_index)).to_dict(),
            "what_test_max_abs_t": rep.max_abs_t,
            "unresolved_energy_smallest_delta": mean_estimate(raw).to_dict(),
        }
    return out


def _honest_reduce(cfg: RunConfig, analyses: list[str], r: dict[str, np.ndarray]) -> tuple[dict, list[str], dict]:
    scenario = cfg.scenario.honest_time.build()
    grid = cfg.grid
    payload: dict[str, Any] = {}
    failures: list[str] = []
    if scenario.tail_mode == "truncate":
        ht.check_tail(r["tail"], scenario)
    qs = r["qs_T"]
    payload["sample"] = {
        "P(g beyond T_sim)": mean_estimate(r["beyond"]).to_dict(),
        "mean tail bound": mean_estimate(r["tail"]).to_dict(),
        "E[g ^ T]": mean_estimate(r["stop_time"]).to_dict(),
    }
    if "qs_density" in analyses:
        est = mean_estimate(qs)
        payload["qs_density"] = {
            "mean_R+_T": est.to_dict(),
            "consistent_with_one": est.within(1.0, 3.0),
            "second_moment": float(np.mean(qs * qs)),
            "E_QS[X_T]": weighted_expectation(r["X_ck"][:, -1], qs).to_dict(),
            "R_status": "undefined: integrability failure (the drift energy after g diverges)",
        }
    if "supermartingale" in analyses:
        ck = [grid.index_of(t) for t in cfg.checkpoint_times()]
        times = cfg.checkpoint_times()
        gate = r["g_after_ck"][:, :-1]
        payload["supermartingale"] = {
            "under_QS": supermartingale_monotonicity(r["X_ck"], qs, ck, times).to_dict(),
            "under_QS_before_g": supermartingale_monotonicity(r["X_ck"], qs, ck, times, gate=gate).to_dict(),
            "under_P": supermartingale_monotonicity(r["X_ck"], None, ck, times).to_dict(),
            "under_P_before_g": supermartingale_monotonicity(r["X_ck"], None, ck, times, gate=gate).to_dict(),
        }
    if "short_audit" in analyses:
        payload["short_audit"] = st.arbitrage_report("short_after_g", r["gain:short_after_g"], 1.0).to_dict()
    if "long_only_audit" in analyses:
        specs = _honest_specs(cfg)
        audit = st.long_only_audit_from_gains(specs, {s.name: r[f"gain:{s.name}"] for s in specs}, qs)
        payload["long_only_audit"] = audit.to_dict()
        if audit.contradictions:
            failures.append(f"long_only_audit: long-only strategies {audit.contradictions} show arbitrage evidence")
    if "drift_energy" in analyses:
        prof = ht.summarize_energy(r["energy"], cfg.deltas())
        d = prof.to_dict()
        d["resolution"] = cfg.analysis.energy_resolution
        pre = mean_estimate(r["pre_g_energy"] - scenario.sigma**2 * r["stop_time"])
        d["pre_g_identity_gap"] = pre.to_dict()
        payload["drift_energy"] = d
        payload["floor_sensitivity"] = _floor_sensitivity(cfg)
    if "entropy" in analyses:
        terms = {k.split(":", 1)[1]: v for k, v in r.items() if k.startswith("ent:")}
        pts = ht.summarize_entropy(terms, scenario.sigma, cfg.analysis.c_grid)
        payload["entropy"] = [p.to_dict() for p in pts]
    if "what_test" in analyses:
        rep = orthogonality_report(
            r["what_sums"],
            ["1", "W", "1{g<=t}", "X/S"],
            _bucket_times(grid, cfg.analysis.n_buckets),
        )
        d = rep.to_dict()
        d["window_steps"] = cfg.analysis.what_window
        payload["what_test"] = d
    T_index = grid.index_of(scenario.T)
    t = grid.nodes[report_nodes(grid.n_steps, T_index)]
    tracks = {
        "t": t.tolist(),
        "mean X": _col_means(r["X_report"]),
        "mean S": _col_means(r["S_report"]),
        "QS-weighted X": _col_means(r["X_report"] * qs[:, None]),
        "mean What": _col_means(r["What_report"]),
    }
    return payload, failures, tracks


def _col_means(a: np.ndarray) -> list[float]:
    return [float(x) for x in engine.path_mean(a)]


# ---------------------------------------------------------------- density lab


def _lab_extra(cfg: RunConfig, analyses: list[str]):
    grid = cfg.grid
    rnodes = report_nodes(grid.n_steps, grid.n_steps)
    nb = cfg.analysis.n_buckets

    def extra(p: dl.LabPaths) -> dict[str, np.ndarray]:
        out = {
            "D_report": p["D*"].values[:, rnodes],
            "R_report": p["R"].values[:, rnodes],
            "R+_report": p["R+"].values[:, rnodes],
        }
        if "null_projection" in analyses:
            out["np_sums"] = dl.null_projection_sums(p, dl.default_functionals(p), nb)
        if "immersion" in analyses:
            eta = p.eta[:, None] * np.ones((1, grid.n_nodes))
            funcs = [eta, eta * np.sign(p["B"].values)]
            out["imm_sums"] = increment_sums(p["X"], funcs, n_buckets=nb)
        return out

    return extra


def _lab_reduce(cfg: RunConfig, analyses: list[str], r: dict[str, np.ndarray]) -> tuple[dict, list[str], dict]:
    block = cfg.scenario.density_lab
    scenario = block.build()
    grid = cfg.grid
    payload: dict[str, Any] = {}
    failures: list[str] = []
    w = r["D_T"]
    pos = int((r["min_X"] <= 0).sum())
    payload["sample"] = {
        "variant": scenario.variant,
        "mean D*_T": mean_estimate(w).to_dict(),
        "positivity_violations": pos,
        "positivity_fraction": pos / w.shape[0],
        "max |D*R - 1| before T0": float(r["DR_gap"].max()),
        "hitting_oracle": dl.hitting_oracle(scenario.T) if scenario.variant == "absorbing" else 0.0,
    }
    if pos > 1e-4 * w.shape[0]:
        failures.append(f"positivity: {pos} paths with X <= 0 exceed the 1e-4 budget")
    if "defects" in analyses:
        coarse = None
        if cfg.analysis.richardson and "R_T_coarse" in r:
            coarse = (r["R_T_coarse"], r["R+_T_coarse"], r["D_T_coarse"])
        try:
            rep_r, rep_p = dl.defect_pair(r["R_T"], r["R+_T"], w, coarse=coarse)
        except ConsistencyError as exc:
            failures.append(f"defect_pair: {exc}")
            from .measures import martingale_defect

            rep_r = martingale_defect(r["R_T"], w, coarse=None if coarse is None else (coarse[0], coarse[2]))
            rep_p = martingale_defect(r["R+_T"], w, coarse=None if coarse is None else (coarse[1], coarse[2]))
        payload["defects"] = {
            "R": rep_r.to_dict(),
            "R+": rep_p.to_dict(),
            "agree": (rep_r.verdict == STRICT_LOCAL) == (rep_p.verdict == STRICT_LOCAL),
            "scheme": block.scheme,
        }
    if "tau" in analyses:
        nodes = {"T0": r["T0"], "tau": r["tau"], "tau+": r["tau+"]}
        ts = dl.tau_statistics_from_nodes(nodes, grid.index_of(scenario.T), scenario.T)
        payload["tau"] = ts.to_dict()
        if not ts.equivalent:
            failures.append("tau_statistics: the three events are neither all positive nor all null")
    if "null_projection" in analyses:
        rep = orthogonality_report(r["np_sums"], ["1", "B", "sign(B)"], dl.null_projection_buckets(grid, cfg.analysis.n_buckets))
        payload["null_projection"] = rep.to_dict()
    if "immersion" in analyses:
        names = ["eta", "eta*sign(B)"]
        buckets = _bucket_times(grid, cfg.analysis.n_buckets)
        payload["immersion"] = {
            "weights D*_T R_T": orthogonality_report(r["imm_sums"], names, buckets, w * r["R_T"]).to_dict(),
            "weights D*_T": orthogonality_report(r["imm_sums"], names, buckets, w).to_dict(),
        }
    rn = report_nodes(grid.n_steps, grid.n_steps)
    tracks = {
        "t": grid.nodes[rn].tolist(),
        "mean D*": _col_means(r["D_report"]),
        "P-mean R": _col_means(r["R_report"] * w[:, None]),
        "P-mean R+": _col_means(r["R+_report"] * w[:, None]),
    }
    return payload, failures, tracks


# ---------------------------------------------------------------- factorization


def _factor_run(cfg: RunConfig, analyses: list[str]) -> tuple[dict, list[str], dict]:
    sc = cfg.scenario.factorization.build()
    e = cfg.engine
    payload: dict[str, Any] = {}
    if "orthogonal_product" in analyses:
        payload["orthogonal_product"] = fz.orthogonal_product_check(sc, cfg.grid, e.n_paths, e.seed, workers=e.threads).to_dict()
    if "regime_switch" in analyses:
        payload["regime_switch"] = [r.to_dict() for r in fz.regime_switch_check(sc, cfg.grid, e.n_paths, e.seed, workers=e.threads)]
    return payload, [], {}


# ---------------------------------------------------------------- driver


def _path_dump(cfg: RunConfig) -> list[dict]:
    """Full tracks of the first ``dump_paths`` paths (same paths as the run)."""
    k = min(cfg.output.dump_paths, cfg.engine.n_paths)
    if k == 0:
        return []
    ens = engine.sample_brownian(cfg.grid, k, cfg.engine.seed, cfg.engine.antithetic)
    kind = cfg.scenario.kind
    if kind == "honest_time":
        p = ht.honest_time_from_ensemble(cfg.scenario.honest_time.build(), ens, check_truncation=False)
        tracks = {lab: p[lab].values for lab in ("W", "X", "S", "What", "alpha")}
        tracks["R+"] = ht.qs_density(p).values
    elif kind == "density_lab":
        p = dl.lab_from_ensemble(cfg.scenario.density_lab.build(), ens)
        dl.lab_densities(p, cfg.scenario.density_lab.scheme)
        tracks = {lab: p[lab].values for lab in ("B", "X", "D*", "G", "alpha", "R", "R+")}
    else:
        tracks = {"W": ens["W"].values}
    t = cfg.grid.nodes
    rows = []
    for i in range(k):
        for j in range(t.shape[0]):
            row = {"path": i, "node": j, "t": float(t[j])}
            row.update({lab: float(v[i, j]) for lab, v in tracks.items()})
            rows.append(row)
    return rows


def run(cfg: RunConfig, analyses: list[str] | None = None) -> RunResult:
    """Simulate, run the analyses and build the report (nothing is written to disk)."""
    chosen = cfg.analyses(analyses)
    e = cfg.engine
    t0 = time.perf_counter()
    kind = cfg.scenario.kind
    if kind == "honest_time":
        r = engine.map_paths(
            _honest_collector(cfg, chosen), cfg.grid, e.n_paths, e.seed,
            antithetic=e.antithetic, chunk_size=e.chunk_size, workers=e.threads,
        )
        payload, failures, tracks = _honest_reduce(cfg, chosen, r)
    elif kind == "density_lab":
        sc = cfg.scenario.density_lab.build()
        extra = _lab_extra(cfg, chosen)
        scheme = cfg.scenario.density_lab.scheme
        r = engine.map_paths(
            lambda ens: dl.lab_per_path(sc, ens, coarse=cfg.analysis.richardson, scheme=scheme, extra=extra),
            cfg.grid, e.n_paths, e.seed,
            antithetic=e.antithetic, chunk_size=e.chunk_size, workers=e.threads,
        )
        payload, failures, tracks = _lab_reduce(cfg, chosen, r)
    else:
        payload, failures, tracks = _factor_run(cfg, chosen)
    elapsed = time.perf_counter() - t0
    report = {
        "artifact": {"name": "insiderlab", "version": __version__},
        "scenario": kind,
        "seed": e.seed,
        "analyses": chosen,
        "config": cfg.model_dump(),
        "payload": jsonable(payload),
        "consistency": {"ok": not failures, "failures": failures},
        "meta": {
            "wall_clock_s": elapsed,
            "paths_per_s": e.n_paths / elapsed if elapsed > 0 else None,
            "threads": e.threads,
            "n_paths": e.n_paths,
            "n_steps": e.n_steps,
        },
    }
    return RunResult(report, tracks, _path_dump(cfg))


def flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    """``(dotted key, scalar)`` rows of a nested report."""
    rows: list[tuple[str, Any]] = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            rows += flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and any(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            rows += flatten(v, f"{prefix}[{i}]")
    else:
        rows.append((prefix, json.dumps(obj) if isinstance(obj, list) else obj))
    return rows


def write_outputs(result: RunResult, directory: str | Path, formats: list[str]) -> list[Path]:
    """Write ``report.json`` and, for ``csv``, summary and track dumps.  Returns the files written."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    path.write_text(json.dumps(jsonable(result.report), indent=2, sort_keys=True) + "\n")
    written.append(path)
    if "csv" in formats:
        path = out / "summary.csv"
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["key", "value"])
            wr.writerows(flatten(result.report["payload"]))
        written.append(path)
        if result.tracks:
            path = out / "tracks.csv"
            labels = list(result.tracks)
            with path.open("w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["node"] + labels)
                for i in range(len(result.tracks["t"])):
                    wr.writerow([i] + [result.tracks[k][i] for k in labels])
            written.append(path)
        if result.path_tracks:
            path = out / "paths.csv"
            with path.open("w", newline="") as fh:
                wr = csv.DictWriter(fh, fieldnames=list(result.path_tracks[0]))
                wr.writeheader()
                wr.writerows(result.path_tracks)
            written.append(path)
    return written
