"""Static SVG figures and a text summary for a finished run directory."""
from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import FancyArrowPatch  # noqa: E402
from matplotlib.patches import Polygon as MplPolygon  # noqa: E402

from . import io as rio  # noqa: E402
from .polling import observed_policy  # noqa: E402

# fixed ids and no timestamp make the SVG bytes a function of the inputs only
RC = {"svg.hashsalt": "relaypoll", "svg.fonttype": "path", "font.size": 9}
TRACE_WINDOW_S = 240.0


class MissingInputsError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("missing report inputs: " + ", ".join(missing))


def _inputs(run_dir: Path) -> dict:
    return {
        "regions (regions/*.region, partitions/*.json)": (
            sorted(run_dir.glob("regions/pair*.region")), sorted(run_dir.glob("partitions/pair*.json"))),
        "policy (policy/aorp.json)": run_dir / "policy" / "aorp.json",
        "queue trace (sim/trace_aorp.csv)": run_dir / "sim" / "trace_aorp.csv",
        "velocity sweep (sim/velocity_sweep.csv)": run_dir / "sim" / "velocity_sweep.csv",
    }


def check_inputs(run_dir) -> dict:
    run_dir = Path(run_dir)
    inp = _inputs(run_dir)
    missing = []
    for name, v in inp.items():
        ok = all(len(x) > 0 for x in v) and len(v[0]) == len(v[1]) if isinstance(v, tuple) else v.exists()
        if not ok:
            missing.append(name)
    if missing:
        raise MissingInputsError(missing)
    return inp


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return rio.atomic_write(path, buf.getvalue())


def region_figure(regions, partitions, positions=None):
    ws = regions[0].workspace
    fig, ax = plt.subplots(figsize=(6, 6))
    colors = plt.get_cmap("tab10")
    for i, (r, ps) in enumerate(zip(regions, partitions)):
        c = colors(i % 10)
        pts = r.points
        ax.scatter(pts[:, 0], pts[:, 1], s=1.5, color=c, alpha=0.35, linewidths=0)
        for poly in ps.polygons:
            ax.add_patch(MplPolygon(poly.vertices, closed=True, fill=False, edgecolor=c, linewidth=0.8))
        if positions is not None:
            ax.plot(*positions[i], marker="*", color="k", markersize=9)
            ax.annotate(f"q{i + 1}", positions[i], textcoords="offset points", xytext=(5, 5))
    ax.set_xlim(ws.x_min, ws.x_max)
    ax.set_ylim(ws.y_min, ws.y_max)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("Predicted relay regions and convex partitions")
    return fig


def policy_figure(positions, pi):
    """Nodes at relay positions; one arc per ordered pair with width proportional to the observed p~_ij."""
    X = np.asarray(positions, dtype=float)
    n = len(X)
    P = observed_policy(pi).p_tilde if n > 1 else np.zeros((1, 1))
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(X[:, 0], X[:, 1], s=120, color="tab:blue", zorder=3)
    for i in range(n):
        ax.annotate(f"q{i + 1}", X[i], textcoords="offset points", xytext=(8, 8), fontsize=11)
    span = float(np.ptp(X, axis=0).max()) if n > 1 else 1.0
    for i in range(n):
        for j in range(n):
            if i == j or P[i, j] <= 0:
                continue
            arrow = FancyArrowPatch(X[i], X[j], connectionstyle="arc3,rad=0.15", arrowstyle="-|>",
                                    mutation_scale=12, linewidth=0.5 + 6.0 * P[i, j], color="tab:gray",
                                    shrinkA=8, shrinkB=8, zorder=2)
            ax.add_patch(arrow)
            mid = 0.5 * (X[i] + X[j])
            d = X[j] - X[i]
            normal = np.array([d[1], -d[0]]) / max(np.linalg.norm(d), 1e-12)
            ax.text(*(mid + 0.08 * np.linalg.norm(d) * normal), f"{P[i, j]:.2f}", ha="center", va="center",
                    fontsize=8)
    pad = 0.15 * span + 1.0
    ax.set_xlim(X[:, 0].min() - pad, X[:, 0].max() + pad)
    ax.set_ylim(X[:, 1].min() - pad, X[:, 1].max() + pad)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title("Observed routing probabilities (edge width)")
    return fig


def trace_figure(trace, window: float = TRACE_WINDOW_S):
    t = trace.times
    sel = t >= t[-1] - window
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for q in range(trace.lengths.shape[1]):
        ax.step(t[sel], trace.lengths[sel, q], where="post", label=f"q{q + 1}", linewidth=1)
    serving = sel & (trace.state == 1)
    ax.fill_between(t, 0, 1, where=serving, step="post", transform=ax.get_xaxis_transform(),
                    color="tab:green", alpha=0.12, label="serving", linewidth=0)
    ax.set_xlim(t[sel][0], t[sel][-1])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("queue length (customers)")
    ax.set_title(f"Queue lengths over the last {window:g} s")
    ax.legend(loc="upper right", fontsize=8)
    return fig


def velocity_figure(rows):
    a = np.array([[r[1], r[2], r[3], r[4]] for r in rows], dtype=float)
    x = a[:, 0]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(x, a[:, 2], yerr=a[:, 3], fmt="o", capsize=3, label="simulated (95% CI)")
    ax.plot(x, a[:, 1], "s", mfc="none", label="analytic")
    coef = np.polyfit(x, a[:, 1], 1)
    xx = np.linspace(0, x.max() * 1.05, 50)
    ax.plot(xx, np.polyval(coef, xx), "--", linewidth=0.8, label=f"fit {coef[1]:.3g} + {coef[0]:.3g}/v")
    ax.set_xlabel("1/v (s/m)")
    ax.set_ylabel("mean wait (s)")
    ax.set_title("Mean wait against inverse speed")
    ax.legend(fontsize=8)
    return fig


def summary_text(run_dir: Path) -> str:
    man = json.loads((run_dir / "manifest.json").read_text()) if (run_dir / "manifest.json").exists() else {}
    lines = [f"run directory: {run_dir.name}"]
    if "scaling_note" in man:
        lines.append(f"customer scaling: {man['scaling_note']}")
    pc = run_dir / "regions" / "pc_report.csv"
    if pc.exists():
        _, rows = rio.read_csv(pc)
        lines.append("prediction conservatism (pair, p_th, cells, p_c):")
        lines += [f"  {r[0]}  {r[1]:.2f}  {r[2]:6d}  {r[3]:.3f}" for r in rows]
    summ = run_dir / "sim" / "summary.json"
    if summ.exists():
        s = json.loads(summ.read_text())
        lines.append("mean wait (s): policy, simulated +/- 95% CI, analytic")
        for k in ("aorp", "aorpt", "baseline"):
            if k in s:
                an = s[k].get("w_analytic_s")
                an_s = f"{an:.4f}" if an is not None else "n/a"
                lines.append(f"  {k:9s} {s[k]['mean_wait']:.4f} +/- {s[k]['mean_wait_ci']:.4f}  {an_s}")
        if "aorpt_vs_baseline" in s:
            g = s["aorpt_vs_baseline"]
            lines.append(f"baseline minus AORPT: {g['baseline_minus_aorpt_s']:.3f} s "
                         f"({100 * g['relative_gain']:.1f}% of baseline)")
        if "aorp" in s:
            a = s["aorp"]
            lines.append(f"power (W): simulated {a['mean_power']:.4f}, predicted {a['power_predicted_w']:.4f}")
            lines.append(f"service rate (1/s): simulated {a['service_rate']:.4f}, "
                         f"predicted {a['service_rate_predicted_per_s']:.4f}")
    return "\n".join(lines) + "\n"


def report(run_dir) -> list[Path]:
    """Write the four figures and summary.txt under ``run_dir/report``."""
    run_dir = Path(run_dir)
    inp = check_inputs(run_dir)
    out = run_dir / "report"
    (region_files, partition_files), policy_file, trace_file, vel_file = inp.values()
    regions = [rio.read_region(f) for f in region_files]
    parts = [rio.read_partition(f) for f in partition_files]
    pol = rio.read_policy(policy_file)
    _, vrows = rio.read_csv(vel_file)
    files = []
    with plt.rc_context(RC):
        files.append(_save(region_figure(regions, parts, pol.positions), out / "regions.svg"))
        files.append(_save(policy_figure(pol.positions, pol.pi), out / "policy_graph.svg"))
        files.append(_save(trace_figure(rio.read_trace_csv(trace_file)), out / "queue_trace.svg"))
        files.append(_save(velocity_figure(vrows), out / "wait_vs_inverse_speed.svg"))
    files.append(rio.atomic_write(out / "summary.txt", summary_text(run_dir)))
    return files
