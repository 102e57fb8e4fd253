"""Experiment stages over a run directory: generate, predict, partition, plan, simulate, sweep.

Every stage reads what earlier stages wrote and records its outputs (with
SHA-256 digests) in ``manifest.json``, so later stages need nothing but the
run directory. All randomness derives from the scenario's root seed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as rio
from .channel import (
    GpModel,
    connectivity_probability,
    extract_relay_region,
    generate_link_field,
    pair_success_probability,
    predict,
    sample_measurements,
    true_connectivity,
)
from .errors import EmptyRegionError
from .geometry import ConvexPartitionSet, ConvexPolygon, partition_region
from .optimizer import RelayPolicy, aorp, baseline_cyclic_policy
from .polling import PollingInstance, avg_wait, mg1_wait, observed_policy
from .scenario import Scenario
from .sim import SimConfig, SimMetrics, StochasticRouting, aggregate, predicted_power, run

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PC_LEVELS = (0.5, 0.7, 0.9)
SWEEP_SEEDS = 10

# CSV column orders; the CLI help prints these
PC_COLUMNS = ("pair", "p_th", "region_cells", "p_c")
ITERATION_COLUMNS = ("iteration", "step", "w_bar_s", "s_bar_s")
METRICS_COLUMNS = ("policy",) + SimMetrics.CSV_COLUMNS
VELOCITY_COLUMNS = ("v_mps", "inv_v_s_per_m", "w_analytic_s", "w_sim_s", "w_sim_ci_s", "stage_count")
TRAFFIC_COLUMNS = ("rho_1", "rho_s", "pi_tilde_1", "w_bar_s")
OFFSET_COLUMNS = ("offset_m", "rho_1", "pi_tilde_1", "w_bar_s")


# --------------------------------------------------------------------------- manifest


def read_manifest(run_dir) -> dict:
    p = Path(run_dir) / MANIFEST
    if not p.exists():
        raise FileNotFoundError(f"{p} not found; run 'generate' first")
    return json.loads(p.read_text())


def scenario_of(run_dir) -> Scenario:
    return Scenario.model_validate(read_manifest(run_dir)["scenario"])


def _record(run_dir: Path, stage: str, files, extra=None, scenario: Scenario | None = None):
    p = run_dir / MANIFEST
    man = json.loads(p.read_text()) if p.exists() else {}
    if scenario is not None:
        man["scenario"] = scenario.model_dump(mode="json")
        man["seed"] = scenario.seed
        man["scaling_note"] = scenario.scaling_note()
    entry = {"files": {str(Path(f).relative_to(run_dir)): rio.sha256(f) for f in files}}
    if extra:
        entry.update(extra)
    man.setdefault("stages", {})[stage] = entry
    rio.atomic_write(p, rio.dumps(rio._jsonable(man)))
    return man


def _stage_files(run_dir: Path, stage: str) -> list[Path]:
    man = read_manifest(run_dir)
    if stage not in man.get("stages", {}):
        raise FileNotFoundError(f"stage {stage!r} has not been run in {run_dir}")
    return [run_dir / f for f in man["stages"][stage]["files"]]


def pair_label(i: int) -> str:
    return f"pair{i + 1}"


# --------------------------------------------------------------------------- generate


def generate(scenario: Scenario, run_dir) -> list[Path]:
    """Two CNR fields per pair (source link and destination link)."""
    run_dir = Path(run_dir)
    scenario.check_stability()
    ws = scenario.workspace.build()
    params = scenario.channel.params()
    files = []
    for i, pair in enumerate(scenario.pairs):
        for j, (role, node) in enumerate((("source", pair.source_m), ("destination", pair.destination_m))):
            f = generate_link_field(ws, node, params, scenario.stage_seed("field", i, j))
            files.append(rio.write_field(run_dir / "fields" / f"{pair_label(i)}_{role}.field", f))
    _record(run_dir, "generate", files, {"threshold_note": scenario.channel.note}, scenario=scenario)
    return files


def _fields(run_dir: Path, n: int):
    out = []
    for i in range(n):
        src = rio.read_field(run_dir / "fields" / f"{pair_label(i)}_source.field")
        dst = rio.read_field(run_dir / "fields" / f"{pair_label(i)}_destination.field")
        out.append((src, dst))
    return out


# --------------------------------------------------------------------------- predict


def pair_probability(src, dst, threshold_db: float, fraction: float, seed) -> np.ndarray:
    """End-to-end success probability grid from sampled measurements of both links."""
    probs = []
    for f, s in zip((src, dst), seed.spawn(2)):
        model = GpModel.fit(sample_measurements(f, fraction, s))
        pf = predict(model, f.workspace)
        probs.append(connectivity_probability(pf.mean_db, pf.variance_db2, threshold_db))
    return pair_success_probability(*probs)


def predict_regions(run_dir) -> tuple[list[Path], list[dict]]:
    """Predicted relay region per pair at the scenario's p_th, plus the p_c report."""
    run_dir = Path(run_dir)
    sc = scenario_of(run_dir)
    thr = sc.channel.threshold_db
    levels = sorted(set(PC_LEVELS) | {sc.p_th})
    files, report = [], []
    for i, (src, dst) in enumerate(_fields(run_dir, sc.n)):
        label = pair_label(i)
        p_sd = pair_probability(src, dst, thr, sc.sample_fraction, sc.stage_seed("sample", i))
        truth = true_connectivity(src, dst, thr)
        for p in levels:
            mask = p_sd >= p
            report.append({"pair": label, "p_th": p, "region_cells": int(mask.sum()),
                           "p_c": float(truth[mask].mean()) if mask.any() else float("nan")})
        try:
            region = extract_relay_region(p_sd, sc.p_th, src.workspace, label)
        except EmptyRegionError as exc:
            raise EmptyRegionError(f"{label}: {exc}") from exc
        files.append(rio.write_region(run_dir / "regions" / f"{label}.region", region))
    files.append(rio.write_csv(run_dir / "regions" / "pc_report.csv", PC_COLUMNS,
                               [[r[c] for c in PC_COLUMNS] for r in report]))
    _record(run_dir, "predict", files)
    return files, report


def _regions(run_dir: Path, n: int):
    return [rio.read_region(run_dir / "regions" / f"{pair_label(i)}.region") for i in range(n)]


# --------------------------------------------------------------------------- partition


def partition(run_dir) -> list[ConvexPartitionSet]:
    run_dir = Path(run_dir)
    sc = scenario_of(run_dir)
    parts, files = [], []
    for i, region in enumerate(_regions(run_dir, sc.n)):
        ps = partition_region(region, sc.partition.alpha_m, sc.partition.rdp_epsilon_m, region_id=pair_label(i))
        parts.append(ps)
        files.append(rio.write_partition(run_dir / "partitions" / f"{pair_label(i)}.json", ps))
    _record(run_dir, "partition", files, {"coverage": [p.coverage for p in parts], "pieces": [p.m for p in parts]})
    return parts


def _partitions(run_dir: Path, n: int) -> list[ConvexPartitionSet]:
    return [rio.read_partition(run_dir / "partitions" / f"{pair_label(i)}.json") for i in range(n)]


# --------------------------------------------------------------------------- plan


def plan_policies(partitions, sc: Scenario, v: float | None = None) -> tuple[RelayPolicy, RelayPolicy]:
    v = sc.motion.v_mps if v is None else v
    opt = sc.optimizer
    pol = aorp(partitions, sc.lam, sc.zeta, v, tol=opt.tol_s, max_iters=opt.max_iters, K=opt.table_period,
               position_tol=opt.position_tol_m)
    base = baseline_cyclic_policy(partitions, v, sc.lam, sc.zeta, position_tol=opt.position_tol_m)
    return pol, base


def plan(run_dir) -> tuple[RelayPolicy, RelayPolicy]:
    run_dir = Path(run_dir)
    sc = scenario_of(run_dir)
    sc.check_stability()
    pol, base = plan_policies(_partitions(run_dir, sc.n), sc)
    d = run_dir / "policy"
    files = [
        rio.write_policy(d / "aorp.json", pol),
        rio.write_table(d / "aorpt_table.json", pol.table),
        rio.write_policy(d / "baseline.json", base),
        rio.write_csv(d / "iterations.csv", ITERATION_COLUMNS,
                      [[s["iteration"], s["step"], s["w_bar"], s["s_bar"]] for s in pol.log]),
    ]
    obs = observed_policy(pol.pi)
    _record(run_dir, "plan", files, {
        "w_bar_aorp_s": pol.w_bar,
        "w_bar_mg1_s": mg1_wait(float(np.sum(sc.rho)), sc.zeta),
        "w_bar_baseline_s": base.metadata["w_table"],
        "pi_tilde": obs.pi_tilde,
    })
    return pol, base


def _policies(run_dir: Path):
    d = run_dir / "policy"
    return rio.read_policy(d / "aorp.json"), rio.read_policy(d / "baseline.json")


# --------------------------------------------------------------------------- simulate


def sim_config(sc: Scenario, S, routing, v: float | None = None) -> SimConfig:
    return SimConfig(
        tuple(sc.lam), sc.zeta, tuple(map(tuple, np.asarray(S))), routing, sc.sim.duration_s,
        motion=sc.motion_model(v), gamma_t=sc.channel.gamma_t_w, warmup=sc.sim.warmup_s,
    )


def policy_configs(sc: Scenario, pol: RelayPolicy, base: RelayPolicy) -> dict[str, SimConfig]:
    return {
        "aorp": sim_config(sc, pol.S, StochasticRouting(tuple(pol.pi))),
        "aorpt": sim_config(sc, pol.S, pol.table),
        "baseline": sim_config(sc, base.S, base.table),
    }


def ensemble(config: SimConfig, seeds, trace_dt: float | None = None):
    """Run every seed; only the first run records a queue trace (every ``trace_dt`` seconds)."""
    runs, first_trace = [], None
    for k, s in enumerate(seeds):
        cfg = replace(config, seed=int(s), trace_dt=trace_dt if k == 0 else None)
        m, tr = run(cfg)
        runs.append(m)
        if tr is not None:
            first_trace = tr
    return aggregate(runs), runs, first_trace


def affine_fit(x, y) -> dict:
    """Least-squares y = a + b x with residual norm and R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(res @ res) / ss_tot if ss_tot > 0 else 1.0
    return {"intercept": float(coef[0]), "slope": float(coef[1]), "residual": float(np.linalg.norm(res)), "r2": r2}


def velocity_sweep(sc: Scenario, pol: RelayPolicy, seeds) -> tuple[list[list], dict]:
    """Fixed positions and frequencies; switching times scale as 1/v."""
    v0 = pol.v
    rows = []
    for v in sc.sim.velocity_sweep_mps:
        S = np.asarray(pol.S) * v0 / v
        w_an = avg_wait(PollingInstance(pol.lam, pol.zeta, S, pol.pi))
        summ, _, _ = ensemble(sim_config(sc, S, StochasticRouting(tuple(pol.pi)), v=v), seeds)
        rows.append([v, 1.0 / v, w_an, summ.mean_wait, summ.mean_wait_ci, summ.stage_count])
    a = np.array(rows, dtype=float)
    fits = {"analytic": affine_fit(a[:, 1], a[:, 2]), "simulated": affine_fit(a[:, 1], a[:, 3])}
    vs = list(sc.sim.velocity_sweep_mps)
    ratios = {f"{v}:{2 * v}": a[vs.index(2 * v), 5] / a[vs.index(v), 5] for v in vs if 2 * v in vs}
    fits["stage_count_ratio"] = ratios
    return rows, fits


def simulate(run_dir, seeds=None, sweep: bool = True) -> dict:
    """Seed ensembles for AORP (stochastic), AORPT (table) and the cyclic baseline."""
    run_dir = Path(run_dir)
    sc = scenario_of(run_dir)
    sc.check_stability()
    pol, base = _policies(run_dir)
    seeds = sc.sim_seeds() if seeds is None else list(seeds)
    d = run_dir / "sim"
    files, rows, summary = [], [], {}
    analytic = {"aorp": pol.w_bar, "aorpt": None, "baseline": base.metadata["w_table"]}
    p_pred = predicted_power(sc.motion_model(), sc.channel.gamma_t_w, sc.rho_s)
    for name, cfg in policy_configs(sc, pol, base).items():
        summ, runs, trace = ensemble(cfg, seeds, trace_dt=sc.sim.trace_dt_s)
        rows += [[name, *m.csv_row()] for m in runs]
        if trace is not None:
            files.append(rio.atomic_write(d / f"trace_{name}.csv", trace.to_csv()))
        s = summ.to_dict()
        s.update({
            "w_analytic_s": analytic[name],
            "power_predicted_w": p_pred,
            "service_rate_predicted_per_s": float(np.sum(sc.lam)),
            "service_fraction_predicted": sc.rho_s,
        })
        summary[name] = s
    files.append(rio.write_csv(d / "metrics.csv", METRICS_COLUMNS, rows))
    b, t = summary["baseline"]["mean_wait"], summary["aorpt"]["mean_wait"]
    summary["aorpt_vs_baseline"] = {"baseline_minus_aorpt_s": b - t, "relative_gain": (b - t) / b if b else 0.0}
    summary["scaling_note"] = sc.scaling_note()
    summary["seeds"] = [int(s) for s in seeds]
    if sweep:
        vrows, fits = velocity_sweep(sc, pol, seeds)
        files.append(rio.write_csv(d / "velocity_sweep.csv", VELOCITY_COLUMNS, vrows))
        summary["velocity_fit"] = fits
    files.append(rio.atomic_write(d / "summary.json", rio.dumps(rio._jsonable(summary))))
    _record(run_dir, "simulate", files)
    return summary


# --------------------------------------------------------------------------- sweeps


def traffic_sweep(partitions, sc: Scenario, rho1_values=(0.1, 0.17, 0.4), rho_s: float = 0.5) -> list[list]:
    """Vary rho_1 at fixed rho_s (the rest split evenly); report the observed frequency of q1."""
    rows = []
    n = sc.n
    for r1 in rho1_values:
        rho = np.full(n, (rho_s - r1) / (n - 1))
        rho[0] = r1
        lam = rho / sc.zeta
        pol = aorp(partitions, lam, sc.zeta, sc.motion.v_mps, tol=sc.optimizer.tol_s,
                   max_iters=sc.optimizer.max_iters, position_tol=sc.optimizer.position_tol_m)
        rows.append([r1, rho_s, observed_policy(pol.pi).pi_tilde[0], pol.w_bar])
    return rows


def _shift(ps: ConvexPartitionSet, d) -> ConvexPartitionSet:
    polys = tuple(ConvexPolygon(p.vertices + d) for p in ps.polygons)
    x0, y0, x1, y1 = ps.bounding_box
    return ConvexPartitionSet(polys, ps.source_region_id, (x0 + d[0], y0 + d[1], x1 + d[0], y1 + d[1]),
                              ps.coverage, dict(ps.metadata, offset=list(map(float, d))))


def offset_sweep(partitions, sc: Scenario, offsets=(0.0, 5.0, 10.0, 20.0), rho1_values=None) -> list[list]:
    """Move pair 1's region away from the others' centroid; report its observed frequency."""
    others = np.vstack([p.vertices for p in partitions[1:]]).mean(0)
    c1 = partitions[0].vertices.mean(0)
    u = c1 - others
    u = u / np.linalg.norm(u) if np.linalg.norm(u) > 0 else np.array([1.0, 0.0])
    rho1_values = (float(sc.rho[0]),) if rho1_values is None else rho1_values
    rows = []
    for r1 in rho1_values:
        rho = np.array(sc.rho, dtype=float)
        rho[0] = r1
        lam = rho / sc.zeta
        for off in offsets:
            parts = [_shift(partitions[0], off * u), *partitions[1:]]
            pol = aorp(parts, lam, sc.zeta, sc.motion.v_mps, tol=sc.optimizer.tol_s,
                       max_iters=sc.optimizer.max_iters, position_tol=sc.optimizer.position_tol_m)
            rows.append([off, r1, observed_policy(pol.pi).pi_tilde[0], pol.w_bar])
    return rows


def sweep(run_dir, kind: str) -> Path:
    run_dir = Path(run_dir)
    sc = scenario_of(run_dir)
    parts = _partitions(run_dir, sc.n)
    if sc.n < 2:
        raise ValueError("sweeps need at least two pairs")
    if kind == "traffic":
        f = rio.write_csv(run_dir / "sweeps" / "traffic.csv", TRAFFIC_COLUMNS, traffic_sweep(parts, sc))
    elif kind == "offset":
        f = rio.write_csv(run_dir / "sweeps" / "offset.csv", OFFSET_COLUMNS, offset_sweep(parts, sc))
    else:
        raise ValueError(f"unknown sweep {kind!r}")
    _record(run_dir, f"sweep_{kind}", [f])
    return f
