"""Command line entry point: ``dphfl {run,scenario,analyze,calibrate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from dphfl import engine, harness
from dphfl.engine import RunError, ScheduleError, StepSizeError
from dphfl.privacy import BudgetError, calibrate
from dphfl.topology import TopologyError

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("dphfl")


def _print_summary(results: list[harness.RunResult]) -> None:
    for r in results:
        th = (r.report or {}).get("theorem")
        line = f"seed={r.seed} {r.axis_value or 'run'}: final_loss={r.trace.final.loss:.6g}"
        if r.trace.final.accuracy is not None:
            line += f" accuracy={r.trace.final.accuracy:.4f}"
        if th:
            line += f" lhs={th['lhs_empirical']:.4g} rhs={th['rhs']:.4g} satisfied={th['satisfied']}"
        print(line)


def cmd_run(args) -> int:
    cfg = harness.parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(master_seed=args.seed)
    out = Path(args.out) if args.out else harness.default_output(Path(args.config).stem, cfg.output_dir)
    target, results = harness.run_config(
        cfg, out, force=args.force, jobs=args.jobs, debug_invariants=args.debug_invariants,
        name=Path(args.config).stem,
    )
    _print_summary(results)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_scenario(args) -> int:
    scenario = harness.parse_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seeds": [args.seed]})
    target, results = harness.run_scenario(
        scenario, args.out, force=args.force, jobs=args.jobs, debug_invariants=args.debug_invariants
    )
    _print_summary(results)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    trace_dir = Path(args.trace_dir)
    report, reproduced = harness.reanalyze(trace_dir)
    report_path = trace_dir / "report.json"
    if args.force or not report_path.exists():
        report_path.write_text(engine.dump_json(report))
    th, disp = report["theorem"], report["dispersion"]
    print(f"reproduced={reproduced}")
    print(
        f"theorem: lhs={th['lhs_empirical']:.6g} a1={th['term_a1']:.6g} a2={th['term_a2']:.6g} "
        f"b={th['term_b']:.6g} satisfied={th['satisfied']}"
    )
    print(f"dispersion: max_ratio={disp['max_ratio']:.6g} ok={disp['ok']}")
    return EXIT_OK if reproduced else EXIT_RUNTIME


def cmd_calibrate(args) -> int:
    cfg = harness.parse_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(master_seed=args.seed)
    inputs = harness.build_run(cfg)
    plan = calibrate(inputs.spec, inputs.topology, inputs.schedule, inputs.steps.etas(inputs.schedule.K_g))
    print(engine.dump_json({
        "spec": inputs.spec.to_dict(),
        "topology": inputs.topology.to_dict(),
        "schedule": inputs.schedule.to_dict(),
        "plan": plan.to_dict(),
    }), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dphfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs: bool = True):
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if runs:
            p.add_argument("--out", default=None, help="output directory (default $DPHFL_OUT_DIR/<name>)")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
            p.add_argument("--debug-invariants", action="store_true", help="assert synchronisation after every aggregation")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("run", help="execute one run configuration")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("scenario", help="execute a sweep scenario")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("analyze", help="regenerate a run directory and report its bounds")
    p.add_argument("trace_dir")
    p.add_argument("--force", action="store_true", help="overwrite report.json")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate", help="print the noise plan for a configuration")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except RunError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (harness.ConfigError, ScheduleError, StepSizeError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any other failure inside a run
        log.debug("unhandled", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
