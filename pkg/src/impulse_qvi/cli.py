"""Command-line entry point: ``impulse-qvi {solve,simulate,validate}``.

Exit status: 0 success; 1 missing input or damaged artifacts; 2 invalid
input (parse errors, bad settings, assumption failures without
``--force``); 3 numerical failure or a failed check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .grid import Grid
from .io import ArtifactError, dump_json, load_solution, save_solution, write_manifest
from .model import AssumptionViolation, ProblemError, parse_problem, render_problem, validate_assumptions
from .sde_sim import FeedbackPolicy, FixedSchedule, NoAction, PathConfig, ThresholdRule, estimate_cost, simulate_path
from .solver import SolverConfig, SolverError, solve_penalized
from .validation import (
    check_bounds,
    check_dpp,
    check_obstacle_chain,
    check_viscosity_probe,
    reports_to_json,
)

log = logging.getLogger("impulse_qvi")

EXIT_OK, EXIT_IO, EXIT_INPUT, EXIT_FAIL = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _read(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p.read_bytes()


def _json(data: bytes, label: str) -> dict:
    try:
        doc = json.loads(data)
    except ValueError as err:
        raise UsageError(f"{label}: invalid JSON ({err})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{label}: expected a JSON object")
    return doc


def _floats(text: str, label: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"{label}: expected comma-separated numbers, got {text!r}") from None


def _flags(args, names) -> bytes:
    return json.dumps({n: getattr(args, n) for n in names}, sort_keys=True).encode()


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# solve


def _solver_config(doc: dict, horizon: float) -> SolverConfig:
    doc = dict(doc)
    grid = dict(doc.get("grid") or {})
    if "horizon" in grid and not np.isclose(grid["horizon"], horizon):
        raise UsageError("solver grid horizon differs from the problem horizon")
    grid["horizon"] = horizon
    try:
        doc["grid"] = Grid.from_dict(grid)
        return SolverConfig.from_dict(doc)
    except (KeyError, TypeError) as err:
        raise UsageError(f"solver config: missing or bad field ({err})") from None


def cmd_solve(args) -> int:
    start = time.perf_counter()
    problem_bytes = _read(args.problem)
    solver_bytes = _read(args.solver)
    try:
        spec = parse_problem(problem_bytes.decode(), strict=not args.force)
    except AssumptionViolation as err:
        print(f"assumption failure: {err} (use --force to override)", file=sys.stderr)
        return EXIT_INPUT
    cfg = _solver_config(_json(solver_bytes, "solver config"), spec.horizon)
    if cfg.grid.dim != spec.dim:
        raise UsageError(f"solver grid has dimension {cfg.grid.dim}, problem has {spec.dim}")
    box = np.stack([cfg.grid.lo, cfg.grid.hi], axis=-1)
    report = validate_assumptions(spec, box)
    if not report.ok and not args.force:
        failed = [f"{e.id} ({e.name})" for e in report.entries if e.status == "fail"]
        print(f"assumption failure: sampled check(s) failed: {', '.join(failed)} (use --force to override)",
              file=sys.stderr)
        return EXIT_INPUT
    sol = solve_penalized(spec, cfg)
    diag = {k: v for k, v in sol.diagnostics.items() if k != "wall_time"}
    summary = {
        "problem": json.loads(render_problem(spec)),
        "solver": cfg.to_dict(),
        "diagnostics": diag,
        "residuals": diag["qvi_residual"],
        "iterations": {"outer": diag["outer_iterations"], "newton": diag["newton_iterations"]},
        "assumptions": report.to_dict(),
        "forced": bool(args.force),
    }
    out = _out_dir(args.out)
    save_solution(sol, out, problem_bytes.decode(), solver_bytes.decode(), summary)
    write_manifest(
        out, "solve",
        {"problem": (args.problem, problem_bytes), "solver": (args.solver, solver_bytes),
         "flags": (None, _flags(args, ["force"]))},
        seeds={"assumptions": 0}, wall_time=time.perf_counter() - start, extra={"jobs": args.jobs},
    )
    res = diag["qvi_residual"]
    print(
        f"solved: outer iterations {diag['outer_iterations']}, converged {diag['converged']}; "
        f"r1_max {res['r1_max']:.3e} r2_max {res['r2_max']:.3e} comp_max {res['comp_max']:.3e}; "
        f"obstacle gap {diag['obstacle_gap']:.3e}"
    )
    return EXIT_OK if diag["converged"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# simulate


def parse_strategy(text: str, spec):
    """``none`` | ``policy:DIR`` | ``schedule:t=xi0,xi1;t=...`` | ``threshold:FILE.json``."""
    kind, _, arg = text.partition(":")
    if kind == "none" and not arg:
        return NoAction(), []
    if kind == "policy":
        sol, _, _ = load_solution(arg)
        if sol.grid.dim != spec.dim:
            raise UsageError("policy dimension differs from the problem")
        return FeedbackPolicy(sol), [("policy", Path(arg) / "summary.json")]
    if kind == "schedule":
        events = []
        for item in filter(None, (p.strip() for p in arg.split(";"))):
            t, sep, xi = item.partition("=")
            if not sep:
                raise UsageError(f"schedule event {item!r} must look like t=xi0,xi1")
            vec = _floats(xi, "schedule impulse")
            if len(vec) != spec.dim:
                raise UsageError(f"schedule impulse needs {spec.dim} components")
            events.append((float(t), vec))
        return FixedSchedule(events), []
    if kind == "threshold":
        doc = _json(_read(arg), "threshold rule")
        try:
            return ThresholdRule(doc["trigger"], doc["impulse"], spec.dim), [("threshold", Path(arg))]
        except KeyError as err:
            raise UsageError(f"threshold rule: missing key {err}") from None
    raise UsageError(f"unknown strategy {text!r}")


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    problem_bytes = _read(args.problem)
    spec = parse_problem(problem_bytes.decode(), strict=not args.force)
    mc_bytes = _read(args.mc)
    try:
        cfg = PathConfig.from_dict(_json(mc_bytes, "Monte Carlo config"))
    except TypeError as err:
        raise UsageError(f"Monte Carlo config: {err}") from None
    strategy, extra_inputs = parse_strategy(args.strategy, spec)
    x0 = _floats(args.x0, "--x0")
    if len(x0) != spec.dim:
        raise UsageError(f"--x0 needs {spec.dim} components")
    est = estimate_cost(spec, strategy, x0, args.t0, cfg, richardson=args.richardson, jobs=args.jobs)
    out = _out_dir(args.out)
    result = {"x0": x0, "t0": args.t0, "strategy": strategy.describe(), "config": cfg.to_dict(), **est}
    (out / "estimate.json").write_text(dump_json(result))
    if args.dump_paths:
        pdir = out / "paths"
        pdir.mkdir(exist_ok=True)
        for i in range(min(args.dump_paths, cfg.n_paths)):
            rec = simulate_path(spec, strategy, x0, args.t0, cfg, i)
            (pdir / f"path_{i:05d}.csv").write_text(rec.to_csv())
    inputs = {"problem": (args.problem, problem_bytes), "mc": (args.mc, mc_bytes),
              "flags": (None, _flags(args, ["strategy", "x0", "t0", "richardson", "dump_paths", "force"]))}
    for label, p in extra_inputs:
        inputs[label] = (p, Path(p).read_bytes())
    write_manifest(out, "simulate", inputs, seeds={"mc": cfg.seed}, wall_time=time.perf_counter() - start,
                   extra={"jobs": args.jobs})
    print(f"J = {est['mean']:.6g} ± {est['ci95']:.3g} (95%), n_paths {est['n_paths']}, dt {est['dt']:.3g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate


CHECKS = ("dpp", "bounds", "obstacle", "viscosity")


def cmd_validate(args) -> int:
    start = time.perf_counter()
    sol, problem_text, summary = load_solution(args.solution)
    spec = parse_problem(problem_text, strict=not summary.get("forced", False))
    checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise UsageError(f"unknown checks: {sorted(unknown)} (choose from {', '.join(CHECKS)})")
    inputs = {"solution": (Path(args.solution) / "summary.json", (Path(args.solution) / "summary.json").read_bytes())}
    grid = sol.grid
    region_tol = summary.get("solver", {}).get("region_tol", 1e-5)
    reports = []
    seeds = {"validate": args.seed}
    for name in checks:
        if name == "dpp":
            if args.mc:
                mc_bytes = _read(args.mc)
                inputs["mc"] = (args.mc, mc_bytes)
                cfg = PathConfig.from_dict(_json(mc_bytes, "Monte Carlo config"))
            else:
                cfg = PathConfig(seed=args.seed)
            seeds["mc"] = cfg.seed
            x0 = _floats(args.x0, "--x0") if args.x0 else list(0.5 * (np.asarray(grid.lo) + np.asarray(grid.hi)))
            if len(x0) != spec.dim:
                raise UsageError(f"--x0 needs {spec.dim} components")
            s = args.s if args.s is not None else 0.5 * (args.t0 + spec.horizon)
            reports.append(check_dpp(spec, sol, {"s": s}, x0, args.t0, cfg, abs_tol=args.abs_tol, jobs=args.jobs))
            if args.box:
                bounds = [_floats(part.replace(":", ","), "--box") for part in args.box.split(";")]
                if len(bounds) != spec.dim or any(len(b) != 2 for b in bounds):
                    raise UsageError("--box needs lo:hi per axis separated by ';'")
                reports.append(check_dpp(spec, sol, {"box": bounds}, x0, args.t0, cfg, abs_tol=args.abs_tol,
                                         jobs=args.jobs))
        elif name == "bounds":
            reports.append(check_bounds(sol, spec, seed=args.seed))
        elif name == "obstacle":
            reports.append(check_obstacle_chain(sol, spec, region_tol=region_tol))
        else:
            reports.append(check_viscosity_probe(sol, spec, n_probes=args.n_probes, seed=args.seed))
    out = _out_dir(args.out)
    (out / "report.json").write_text(reports_to_json(reports) + "\n")
    inputs["flags"] = (None, _flags(args, ["checks", "x0", "t0", "s", "box", "abs_tol", "n_probes", "seed"]))
    write_manifest(out, "validate", inputs, seeds=seeds, wall_time=time.perf_counter() - start,
                   extra={"jobs": args.jobs})
    for r in reports:
        print(f"{r.id}: {r.status} (margin {r.margin:.3g})")
    return EXIT_FAIL if any(r.status == "fail" for r in reports) else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impulse-qvi", description="Impulse-control QVI solver, simulator and checks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve the QVI and write a solution directory")
    s.add_argument("--problem", required=True)
    s.add_argument("--solver", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="run even if assumption checks fail")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="Monte Carlo cost of a strategy")
    m.add_argument("--problem", required=True)
    m.add_argument("--strategy", required=True, help="none | policy:DIR | schedule:t=xi;... | threshold:FILE")
    m.add_argument("--x0", required=True)
    m.add_argument("--t0", type=float, default=0.0)
    m.add_argument("--mc", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--richardson", action="store_true")
    m.add_argument("--dump-paths", type=int, default=0)
    m.add_argument("--force", action="store_true")
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="run checks on a solution directory")
    v.add_argument("--solution", required=True)
    v.add_argument("--checks", default=",".join(CHECKS))
    v.add_argument("--out", required=True)
    v.add_argument("--x0", default=None)
    v.add_argument("--t0", type=float, default=0.0)
    v.add_argument("--s", type=float, default=None, help="fixed stopping time (default (t0+T)/2)")
    v.add_argument("--box", default=None, help="also check first exit from lo:hi[;lo:hi...]")
    v.add_argument("--mc", default=None)
    v.add_argument("--abs-tol", type=float, default=None)
    v.add_argument("--n-probes", type=int, default=500)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except ArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except AssumptionViolation as err:
        print(f"assumption failure: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (ProblemError, UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
