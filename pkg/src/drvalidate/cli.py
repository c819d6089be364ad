"""Command-line entry point: ``drvalidate {plan,transfer,simulate,validate,pipeline}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, planner, stl, transfer
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_NOT_VALIDATED, EXIT_INFEASIBLE, EXIT_INPUT = 0, 2, 3, 4


def _verdict_code(verdict: str) -> int:
    return EXIT_OK if verdict == "validated" else EXIT_NOT_VALIDATED


def _load(args):
    overrides = {}
    if getattr(args, "injection_fraction", None) is not None:
        overrides["injection"] = {"kind": "fraction", "fraction": args.injection_fraction}
    return load_scenario(args.scenario, **overrides)


def _print(obj) -> None:
    print(json.dumps(harness._jsonable(obj), indent=2, sort_keys=True))


def cmd_plan(args) -> int:
    sc = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.export_lp:
        Path(args.export_lp).parent.mkdir(parents=True, exist_ok=True)
    plan = harness.make_plan(sc, args.export_lp)
    harness.save_plan(plan, out / "plan_space.json", "space")
    header, data = harness.plan_table(plan)
    harness._write_csv(out / "plan_space.csv", header, data)
    _print({"alpha_star": plan.alpha, "rho_star": plan.rho, "fuel": plan.fuel, "nodes": plan.info.get("nodes"),
            "binaries": plan.info.get("binaries"), "plan": str(out / "plan_space.json")})
    return EXIT_OK


def _space_plan(args):
    plan, platform = harness.load_plan(args.plan)
    if platform != "space":
        raise ValueError(f"{args.plan}: expected a space plan, found {platform!r}")
    return plan


def cmd_transfer(args) -> int:
    sc = _load(args)
    plan_sp = _space_plan(args)
    res, audit = harness.make_transfer(sc, plan_sp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.save_plan(res.plan_uw, out / "plan_underwater.json", "underwater")
    header, data = harness.plan_table(res.plan_uw)
    harness._write_csv(out / "plan_underwater.csv", header, data)
    summary = {"dt_sp": plan_sp.dt, "dt_star": res.dt_star, "speedup": res.speedup,
               "duration_uw": res.duration, "non_monotone": res.non_monotone, "audit": audit}
    (out / "transfer.json").write_text(json.dumps(harness._jsonable(summary), indent=2, sort_keys=True) + "\n")
    _print(summary)
    return EXIT_OK if audit["passed"] else EXIT_NOT_VALIDATED


def cmd_simulate(args) -> int:
    sc = _load(args)
    plan, platform = harness.load_plan(args.plan)
    plat = sc.space if args.platform == "space" else sc.underwater
    spec = sc.spec
    if args.platform == "underwater":
        if platform == "space":
            plan = harness.make_transfer(sc, plan)[0].plan_uw
        spec = stl.time_scale(sc.spec, plan.dt / sc.plan_dt)
    elif platform != "space":
        raise ValueError("the space platform needs a space plan")
    seed = sc.seed if args.seed is None else args.seed
    trace = harness.simulate_closed_loop(sc, args.platform, plan, plan.alpha, seed,
                                         not args.no_feedback_equivalence)
    result = harness.validate(trace, plan, spec, plan.alpha, plat, plan.rho, sc.validation_substeps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness._write_csv(out / f"trace_{args.platform}.csv", harness.Trace.columns(), trace.table())
    harness.save_plan(plan, out / f"plan_{args.platform}.json", args.platform)
    harness.write_panels(out, args.platform, trace, plan, plat, plan.alpha, sc)
    _print(result)
    return _verdict_code(result["verdict"])


def cmd_validate(args) -> int:
    sc = _load(args)
    tdir = Path(args.traces)
    traces = harness.load_traces(tdir)
    if not traces:
        raise FileNotFoundError(f"no trace_*.csv files in {tdir}")
    section = {}
    for name, trace in traces.items():
        plan, _ = harness.load_plan(tdir / f"plan_{name}.json")
        spec = sc.spec if name == "space" else stl.time_scale(sc.spec, plan.dt / sc.plan_dt)
        plat = sc.space if name == "space" else sc.underwater
        section[name] = harness.validate(trace, plan, spec, plan.alpha, plat, plan.rho,
                                         sc.validation_substeps)
    verdict = harness.combine_verdicts(s["verdict"] for s in section.values())
    _print({"platforms": section, "verdict": verdict})
    return _verdict_code(verdict)


def cmd_pipeline(args) -> int:
    sc = _load(args)
    res = harness.run_pipeline(sc, seed=args.seed, out=args.out,
                               feedback_equivalence=not args.no_feedback_equivalence, export_lp=args.export_lp)
    r = res.report
    print(f"scenario {r['scenario']} seed {r['seed']}: alpha*={r['alpha_star']:.6g} rho*={r['rho_star']:.6g} "
          f"speedup={r['speedup']:.4g}")
    for name, p in r["platforms"].items():
        print(f"  {name:10s} delta={p['delta']:.4g} rho_exec={p['rho_executed']:.4g} "
              f"contained={p['contained']} -> {p['verdict']}")
    print(f"verdict: {r['verdict']}  (artifacts in {args.out})")
    return _verdict_code(r["verdict"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drvalidate", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_arg(p):
        p.add_argument("scenario", help="scenario JSON file or shipped scenario name")
        p.add_argument("--injection-fraction", type=float, default=None,
                       help="override the injection with a constant fraction of alpha* times the bound")

    p = sub.add_parser("plan", help="solve the planning MILP")
    scenario_arg(p)
    p.add_argument("--out", default="out")
    p.add_argument("--export-lp", default=None, metavar="PATH")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("transfer", help="re-time a space plan for the underwater platform")
    scenario_arg(p)
    p.add_argument("--plan", required=True, metavar="FILE")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("simulate", help="closed-loop simulation on one platform")
    scenario_arg(p)
    p.add_argument("--plan", required=True, metavar="FILE")
    p.add_argument("--platform", choices=harness.PLATFORMS, required=True)
    p.add_argument("--no-feedback-equivalence", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="re-validate traces written by simulate or pipeline")
    scenario_arg(p)
    p.add_argument("--traces", required=True, metavar="DIR")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pipeline", help="plan, transfer, simulate both platforms and validate")
    scenario_arg(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--no-feedback-equivalence", action="store_true")
    p.add_argument("--export-lp", default=None, metavar="PATH")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (planner.PlanningError, transfer.TransferError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except harness.PipelineError as exc:
        cause = exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, (planner.PlanningError, transfer.TransferError)):
            return EXIT_INFEASIBLE
        return EXIT_INPUT if isinstance(cause, (ScenarioError, ValueError)) else 1


if __name__ == "__main__":
    sys.exit(main())
