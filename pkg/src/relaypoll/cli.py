"""Command-line entry point: ``relaypoll <verb> --scenario FILE --out RUN_DIR [--seed N]``.

Exit codes: 0 success, 2 invalid input, 3 infeasible (empty relay region or
unstable traffic), 4 a numerical tolerance could not be met.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pydantic

from . import pipeline
from .errors import (
    ConvergenceError,
    DegenerateDesignError,
    EmptyRegionError,
    InstabilityError,
    SearchLimitError,
    SingularCovarianceError,
)
from .scenario import Scenario

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_TOLERANCE = 0, 2, 3, 4

log = logging.getLogger("relaypoll")

CSV_HELP = f"""\
CSV outputs (column order):
  regions/pc_report.csv     {", ".join(pipeline.PC_COLUMNS)}
  policy/iterations.csv     {", ".join(pipeline.ITERATION_COLUMNS)}
  sim/metrics.csv           {", ".join(pipeline.METRICS_COLUMNS)}
  sim/trace_<policy>.csv    time_s, q1..qn, robot_state (0 travel, 1 serve, 2 idle), robot_queue
  sim/velocity_sweep.csv    {", ".join(pipeline.VELOCITY_COLUMNS)}
  sweeps/traffic.csv        {", ".join(pipeline.TRAFFIC_COLUMNS)}
  sweeps/offset.csv         {", ".join(pipeline.OFFSET_COLUMNS)}
Queue and pair labels are 1-based. Policies: aorp (stochastic routing),
aorpt (golden-ratio visit table), baseline (uniform cyclic tour).

exit codes: 0 ok, 2 invalid input, 3 infeasible, 4 tolerance failure
"""

VERBS = {
    "generate": "synthesize the source and destination CNR fields of every pair",
    "predict": "sample, fit and predict each pair's relay region; write the p_c report",
    "partition": "split each predicted region into convex polygons",
    "plan": "run the alternating optimizer and the cyclic baseline",
    "simulate": "simulate AORP, AORPT and the baseline over the seed ensemble, plus the speed sweep",
    "report": "render SVG figures and summary.txt",
    "sweep": "traffic or offset sweep of the observed visit frequency of pair 1",
    "run": "all stages from generate through report",
}


def _locate(text: str, loc) -> int | None:
    """Line of the JSON key named by a validation error location, best effort."""
    pos = 0
    found = False
    for part in loc:
        if isinstance(part, str):
            k = text.find(f'"{part}"', pos)
            if k < 0:
                break
            pos, found = k, True
    return text.count("\n", 0, pos) + 1 if found else None


def _validation_message(exc: pydantic.ValidationError, text: str, path) -> str:
    out = [f"{path}: invalid scenario"]
    for e in exc.errors():
        where = ".".join(str(p) for p in e["loc"]) or "(document)"
        line = _locate(text, e["loc"])
        at = f" (line {line})" if line else ""
        out.append(f"  {where}{at}: {e['msg']}")
    return "\n".join(out)


def load(path) -> Scenario:
    text = Path(path).read_text()
    try:
        sc = Scenario.model_validate_json(text)
    except pydantic.ValidationError as exc:
        raise _ScenarioInvalid(_validation_message(exc, text, path)) from exc
    sc.check_stability()
    return sc


class _ScenarioInvalid(ValueError):
    pass


def _scenario_for(args) -> Scenario:
    """The scenario for this invocation: --scenario if given, else the run directory's manifest."""
    out = Path(args.out)
    manifest = out / pipeline.MANIFEST
    if args.scenario:
        sc = load(args.scenario)
        if args.seed is not None:
            sc = sc.with_seed(args.seed)
        if args.verb not in ("generate", "run") and manifest.exists():
            have = pipeline.scenario_of(out)
            if have.model_copy(update={"seed": sc.seed}) != sc:
                raise _ScenarioInvalid(f"{args.scenario} differs from the scenario recorded in {manifest}; "
                                       "rerun 'generate' to start a new run")
        return sc
    if not manifest.exists():
        raise _ScenarioInvalid(f"no --scenario given and {manifest} does not exist")
    sc = pipeline.scenario_of(out)
    sc.check_stability()
    return sc.with_seed(args.seed) if args.seed is not None else sc


def _print_summary(summary: dict):
    for k in ("aorp", "aorpt", "baseline"):
        s = summary[k]
        an = s["w_analytic_s"]
        print(f"{k:9s} W = {s['mean_wait']:.4f} +/- {s['mean_wait_ci']:.4f} s"
              + (f"  (analytic {an:.4f} s)" if an is not None else "")
              + f"  power {s['mean_power']:.4f} W (predicted {s['power_predicted_w']:.4f})"
              + f"  rate {s['service_rate']:.4f}/s (predicted {s['service_rate_predicted_per_s']:.4f})")
    g = summary["aorpt_vs_baseline"]
    print(f"baseline minus AORPT: {g['baseline_minus_aorpt_s']:.3f} s ({100 * g['relative_gain']:.1f}%)")
    print(summary["scaling_note"])


def _dispatch(args) -> None:
    out = Path(args.out)
    verb = args.verb
    if verb == "report":
        from .report import report

        for f in report(out):
            print(f)
        return
    sc = _scenario_for(args)
    # a seed override on a later stage is written to the manifest, so it
    # re-seeds that stage and every stage after it
    if verb in ("generate", "run"):
        files = pipeline.generate(sc, out)
        print(f"generate: {len(files)} field files in {out / 'fields'}")
        if verb == "generate":
            return
    elif args.seed is not None:
        pipeline._record(out, f"seed_override_{verb}", [], {"seed": args.seed}, scenario=sc)
    if verb in ("predict", "run"):
        _, rep = pipeline.predict_regions(out)
        for r in rep:
            print(f"predict: {r['pair']} p_th={r['p_th']:.2f} cells={r['region_cells']} p_c={r['p_c']:.3f}")
    if verb in ("partition", "run"):
        for p in pipeline.partition(out):
            print(f"partition: {p.source_region_id} pieces={p.m} coverage={p.coverage:.3f}")
    if verb in ("plan", "run"):
        pol, base = pipeline.plan(out)
        print(f"plan: AORP W = {pol.w_bar:.4f} s, pi = {[round(float(x), 4) for x in pol.pi]}; "
              f"baseline W = {base.metadata['w_table']:.4f} s, tour = {[q + 1 for q in base.metadata['tour']]}")
    if verb in ("simulate", "run"):
        _print_summary(pipeline.simulate(out, sweep=not args.no_sweep))
    if verb == "run":
        from .report import report

        for f in report(out):
            print(f)
    if verb == "sweep":
        print(pipeline.sweep(out, args.kind))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaypoll", description="Robotic relay polling experiments.",
                                epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, text in VERBS.items():
        s = sub.add_parser(verb, help=text, description=text, epilog=CSV_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("--scenario", help="scenario JSON (later stages default to the run's manifest)")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--seed", type=int, help="override the root seed")
        if verb in ("simulate", "run"):
            s.add_argument("--no-sweep", action="store_true", help="skip the speed sweep")
        if verb == "sweep":
            s.add_argument("--kind", choices=("traffic", "offset"), required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (InstabilityError, EmptyRegionError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, SearchLimitError, SingularCovarianceError) as exc:
        print(f"tolerance failure: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (ValueError, FileNotFoundError, json.JSONDecodeError, DegenerateDesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
