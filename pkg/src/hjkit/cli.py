"""Command-line frontend.

Every command reads a problem file, runs one pipeline, and emits a text or
JSON report.  Exit codes: 0 all checks passed (or pure output), 1 a check
failed (witness in the report), 2 usage or parse error.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources

import sympy as sp

from . import exprs
from .connection import curvature, is_flat
from .exprs import (EXACT_ONLY, EXACT_THEN_PROBABILISTIC, ExprError,
                    ParseError, ZeroTestPolicy, format_expr, latex_expr)
from .hj import check_hj_solution, compose_flatness, generate_hj_system
from .jet import JetError, JetVar, SolvedPde, is_lie_symmetry, prolong_system
from .numeric import (AxisSpec, GridSpec, NumericError, compare_with_closed_form,
                      integrate_section, residual_closed_form, residual_sampled,
                      sample_points, state_jet_vars)
from .problem import ProblemFile, parse_problem
from .variational import (Lagrangian, check_generalized_hj, constraint_equations,
                          elh_system, euler_lagrange, hamiltonian_density,
                          legendre_local, reduce_hamiltonian)

COMMANDS = ("prolong", "flatness", "check-flat", "hj-eq", "check-hj",
            "check-subdiffiety", "el", "legendre", "constraints", "hamiltonian",
            "elh", "check-hj-problem", "integrate", "residual", "symmetry-check",
            "fixtures")


class UsageError(Exception):
    pass


def _policy(args) -> ZeroTestPolicy:
    return ZeroTestPolicy(
        mode=EXACT_ONLY if args.exact_only else EXACT_THEN_PROBABILISTIC,
        samples=args.samples, tolerance=args.zero_tolerance or 1e-9,
        seed=args.seed)


def _load(args) -> ProblemFile:
    try:
        with open(args.problem, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read problem file: {exc}") from exc
    pf = parse_problem(text, order_cap=args.order_cap)
    if args.params:
        overrides = {}
        for item in args.params.split(","):
            if "=" not in item:
                raise UsageError(f"bad --params item '{item}' (expected k=v)")
            k, _, v = item.partition("=")
            overrides[k.strip()] = v.strip()
        pf.params.update(pf.merged_params(overrides))
    return pf


def _parse_assignments(text: str) -> dict[str, str]:
    out = {}
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise UsageError(f"bad assignment '{item}'")
        k, _, v = item.partition("=")
        out[k.strip()] = v.strip()
    return out


def _parse_grid(pf: ProblemFile, text: str, path: str | None) -> GridSpec:
    spec = {}
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        k, _, v = item.partition("=")
        parts = v.split(":")
        if len(parts) != 3:
            raise UsageError(f"grid axis '{item}' must be name=lo:hi:step")
        spec[k.strip()] = AxisSpec(float(parts[0]), float(parts[1]), float(parts[2]))
    missing = [n for n in pf.bundle.base if n not in spec]
    if missing:
        raise UsageError(f"grid misses axes: {', '.join(missing)}")
    axes = tuple(spec[n] for n in pf.bundle.base)
    path_idx = ()
    if path:
        names = [p.strip() for p in path.split(",")]
        if sorted(names) != sorted(pf.bundle.base):
            raise UsageError("--path must list every base variable once")
        path_idx = tuple(pf.bundle.base.index(n) for n in names)
    return GridSpec(axes, path_idx)


def _parse_points(pf: ProblemFile, text: str) -> list[dict[str, float]]:
    axes = {}
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        k, _, v = item.partition("=")
        parts = v.split(":")
        if len(parts) == 1:
            axes[k.strip()] = [float(parts[0])]
        elif len(parts) == 3:
            lo, hi, h = (float(p) for p in parts)
            n = int(round((hi - lo) / h)) + 1
            axes[k.strip()] = [lo + h * j for j in range(n)]
        else:
            raise UsageError(f"point axis '{item}' must be name=value or name=lo:hi:step")
    missing = [n for n in pf.bundle.base if n not in axes]
    if missing:
        raise UsageError(f"points miss axes: {', '.join(missing)}")
    import itertools
    pts = []
    for combo in itertools.product(*[axes[n] for n in pf.bundle.base]):
        pts.append(dict(zip(pf.bundle.base, combo)))
    return pts


def _checks_from(pairs):
    return [{"name": name, **v.to_dict()} for name, v in pairs]


# ---------------------------------------------------------------------------
# command handlers: each returns (status, payload, exit_code)


def cmd_prolong(pf, args):
    S = pf.single("equation", args.equation)
    P = prolong_system(S, args.order)
    exprs_out = [{"name": lhs, "text": rhs} for lhs, rhs in P.describe()]
    return "ok", {"expressions": exprs_out, "data": {"order": P.order}}, 0


def cmd_flatness(pf, args):
    C = pf.single("connection", args.connection)
    comps = curvature(C)
    exprs_out = [{"name": c.label(pf.bundle), "text": format_expr(c.expr),
                  "latex": latex_expr(c.expr)} for c in comps]
    return "ok", {"expressions": exprs_out}, 0


def cmd_check_flat(pf, args):
    C = pf.single("connection", args.connection)
    rep = is_flat(C, _policy(args))
    checks = [{"name": lbl, "expression": format_expr(e), **v.to_dict()}
              for lbl, e, v in rep.components]
    status = "pass" if rep.passed else "fail"
    return status, {"checks": checks, "data": {"basis": rep.basis}}, 0 if rep.passed else 1


def cmd_hj_eq(pf, args):
    S = pf.single("equation", args.equation)
    ansatz = pf.connections[args.connection] if args.connection else None
    if args.compose_flatness:
        comp = compose_flatness(S, args.order, ansatz)
        exprs_out = [{"name": f"eq{i}", "text": format_expr(e), "latex": latex_expr(e)}
                     for i, e in enumerate(comp.equations)]
        data = comp.to_dict()
        return "ok", {"expressions": exprs_out, "data": data}, 0
    hj = generate_hj_system(S, args.order, ansatz)
    exprs_out = [{"name": pf.bundle.jet_name(jv), "text": format_expr(e),
                  "latex": latex_expr(e)} for jv, e in hj.equations]
    return "ok", {"expressions": exprs_out, "data": {"order": args.order}}, 0


def cmd_check_hj(pf, args):
    S = pf.single("equation", args.equation)
    C = pf.single("connection", args.connection)
    rep = check_hj_solution(S, C, _policy(args))
    payload = {"checks": _flatten_hj(rep), "data": rep.to_dict()}
    return ("pass" if rep.passed else "fail"), payload, 0 if rep.passed else 1


def _flatten_hj(rep):
    checks = [{"name": f"flatness {lbl}", **v.to_dict()}
              for lbl, _e, v in rep.flatness.components]
    checks += [{"name": f"containment {name}", "expression": format_expr(e),
                **v.to_dict()} for name, e, v in rep.containment]
    return checks


def cmd_el(pf, args):
    Lg = pf.single("lagrangian", args.lagrangian)
    out = euler_lagrange(Lg)
    exprs_out = [{"name": f"delta/delta {pf.bundle.deps[a]}", "text": format_expr(e),
                  "latex": latex_expr(e)} for a, e in enumerate(out)]
    return "ok", {"expressions": exprs_out}, 0


def cmd_legendre(pf, args):
    Lg = pf.single("lagrangian", args.lagrangian)
    T = legendre_local(Lg)
    exprs_out = [{"name": lhs, "text": rhs} for lhs, rhs in T.describe()]
    return "ok", {"expressions": exprs_out, "data": {"order": T.order}}, 0


def cmd_constraints(pf, args):
    Lg = pf.single("lagrangian", args.lagrangian)
    out = constraint_equations(Lg)
    exprs_out = [{"name": f"constraint{i}", "text": format_expr(e)}
                 for i, e in enumerate(out)]
    return "ok", {"expressions": exprs_out}, 0


def cmd_hamiltonian(pf, args):
    Lg = pf.single("lagrangian", args.lagrangian)
    E = reduce_hamiltonian(Lg) if args.reduce else hamiltonian_density(Lg)
    name = "H (reduced)" if args.reduce else "E"
    return "ok", {"expressions": [{"name": name, "text": format_expr(E),
                                   "latex": latex_expr(E)}]}, 0


def cmd_elh(pf, args):
    Lg = pf.single("lagrangian", args.lagrangian)
    sysm = elh_system(Lg)
    return "ok", {"data": sysm.to_dict()}, 0


def cmd_check_hj_problem(pf, args):
    Lg = pf.single("lagrangian", args.lagrangian)
    C = pf.single("connection", args.connection)
    T = pf.single("momenta", args.momenta)
    rep = check_generalized_hj(Lg, C, T, _policy(args))
    checks = [{"name": f"flatness {lbl}", **v.to_dict()}
              for lbl, _e, v in rep.flatness.components]
    checks += [{"name": f"constraint {lbl}", "expression": format_expr(e), **v.to_dict()}
               for lbl, e, v in rep.constraints]
    checks += [{"name": f"balance {lbl}", "expression": format_expr(e), **v.to_dict()}
               for lbl, e, v in rep.balance]
    payload = {"checks": checks, "data": rep.to_dict()}
    return ("pass" if rep.passed else "fail"), payload, 0 if rep.passed else 1


def cmd_symmetry_check(pf, args):
    S = pf.single("equation", args.equation)
    Y = pf.single("lie_field", args.lie_field)
    rep = is_lie_symmetry(Y, S, _policy(args))
    checks = [{"name": f"rule {name}", **v.to_dict()} for name, v in rep.per_rule]
    return ("pass" if rep.passed else "fail"), {"checks": checks}, 0 if rep.passed else 1


def cmd_integrate(pf, args):
    C = pf.single("connection", args.connection)
    if not args.grid or not args.initial:
        raise UsageError("integrate needs --grid and --initial")
    rep_flat = is_flat(C, _policy(args))
    if not rep_flat.passed:
        return "fail", {"checks": [{"name": "flatness", "verdict": "nonzero"}]}, 1
    grid = _parse_grid(pf, args.grid, args.path)
    initial = {}
    for k, v in _parse_assignments(args.initial).items():
        jv = pf.bundle.parse_jet_name(k)
        if jv is None:
            raise UsageError(f"'{k}' is not a jet coordinate")
        initial[jv] = float(sp.Rational(v))
    tol = args.tolerance if args.tolerance is not None else 1e-8
    section = integrate_section(C, initial, grid, params=pf.params, tolerance=tol)
    data = {"path_defect": section.meta["path_defect"],
            "nodes": int(section.data.size // len(section.jetvars)),
            "flatness_basis": section.meta["flatness_basis"]}
    status, code = "pass", 0
    if args.compare:
        sol = pf.single("solution", args.compare)
        err = compare_with_closed_form(section, sol, params=pf.params)
        data["max_error_vs_solution"] = err
        if err > tol:
            status, code = "fail", 1
    if args.csv:
        section.export_csv(args.csv)
        data["csv"] = args.csv
    return status, {"data": data}, code


def cmd_residual(pf, args):
    S = pf.single("equation", args.equation)
    tol = args.tolerance if args.tolerance is not None else 1e-6
    if args.solution:
        sol = pf.single("solution", args.solution)
        if args.points:
            pts = _parse_points(pf, args.points)
        elif args.box:
            box = {}
            for k, v in _parse_assignments(args.box).items():
                lo, _, hi = v.partition(":")
                box[k] = (float(lo), float(hi))
            pts = sample_points(pf.bundle, box, args.num_points, seed=args.seed)
        else:
            raise UsageError("residual needs --points or --box")
        rep = residual_closed_form(S, sol, pts, params=pf.params, tolerance=tol)
    elif args.connection:
        if not args.grid or not args.initial:
            raise UsageError("sampled residual needs --grid and --initial")
        C = pf.single("connection", args.connection)
        is_flat(C, _policy(args))
        grid = _parse_grid(pf, args.grid, args.path)
        initial = {}
        for k, v in _parse_assignments(args.initial).items():
            initial[pf.bundle.parse_jet_name(k)] = float(sp.Rational(v))
        section = integrate_section(C, initial, grid, params=pf.params)
        rep = residual_sampled(S, section, params=pf.params, tolerance=tol)
    else:
        raise UsageError("residual needs --solution or --connection")
    payload = {"data": rep.to_dict()}
    return ("pass" if rep.passed else "fail"), payload, 0 if rep.passed else 1


def cmd_fixtures(_pf, _args):
    base = resources.files("hjkit") / "fixtures"
    names = sorted(p.name for p in base.iterdir() if p.name.endswith(".hjk"))
    listing = [{"name": n, "path": str(base / n)} for n in names]
    return "ok", {"data": {"fixtures": listing}}, 0


HANDLERS = {
    "prolong": cmd_prolong,
    "flatness": cmd_flatness,
    "check-flat": cmd_check_flat,
    "hj-eq": cmd_hj_eq,
    "check-hj": cmd_check_hj,
    "check-subdiffiety": cmd_check_hj,
    "el": cmd_el,
    "legendre": cmd_legendre,
    "constraints": cmd_constraints,
    "hamiltonian": cmd_hamiltonian,
    "elh": cmd_elh,
    "check-hj-problem": cmd_check_hj_problem,
    "integrate": cmd_integrate,
    "residual": cmd_residual,
    "symmetry-check": cmd_symmetry_check,
    "fixtures": cmd_fixtures,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hjkit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        if cmd != "fixtures":
            p.add_argument("problem", help="problem file (.hjk)")
        p.add_argument("--format", choices=("text", "json"), default="text")
        p.add_argument("--tolerance", type=float, default=None)
        p.add_argument("--zero-tolerance", type=float, default=None)
        p.add_argument("--samples", type=int, default=16)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--params", default=None, metavar="k=v[,k=v...]")
        p.add_argument("--order-cap", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--exact-only", action="store_true")
        p.add_argument("--equation", default=None)
        p.add_argument("--connection", default=None)
        p.add_argument("--lagrangian", default=None)
        p.add_argument("--momenta", default=None)
        p.add_argument("--lie-field", dest="lie_field", default=None)
        p.add_argument("--solution", default=None)
        if cmd == "prolong":
            p.add_argument("-r", "--order", type=int, required=True)
        if cmd == "hj-eq":
            p.add_argument("--order", type=int, required=True)
            p.add_argument("--compose-flatness", action="store_true")
        if cmd == "hamiltonian":
            p.add_argument("--reduce", action="store_true")
        if cmd in ("integrate", "residual"):
            p.add_argument("--grid", default=None)
            p.add_argument("--path", default=None)
            p.add_argument("--initial", default=None)
        if cmd == "integrate":
            p.add_argument("--csv", default=None)
            p.add_argument("--compare", default=None)
        if cmd == "residual":
            p.add_argument("--points", default=None)
            p.add_argument("--box", default=None)
            p.add_argument("--num-points", type=int, default=200)
    return ap


def _render_text(report) -> str:
    lines = [f"hjkit {report['command']}: {report['status']}"]
    for e in report.get("expressions", []):
        lines.append(f"  {e['name']}: {e['text']}")
    for c in report.get("checks", []):
        extra = ""
        if c.get("verdict") == "zero-probabilistic":
            extra = f" (samples={c['samples']}, max|.|={c['max_magnitude']:.3e})"
        if c.get("verdict") == "nonzero" and "witness" in c:
            ws = ", ".join(f"{k}={v}" for k, v in c["witness"].items())
            extra = f" (witness {ws} -> {c['witness_value']})"
        lines.append(f"  {c['name']}: {c.get('verdict', '?')}{extra}")
    data = report.get("data")
    if data:
        lines.append("  data: " + json.dumps(data, sort_keys=True, default=str))
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    exprs.THREADS = max(1, args.threads)
    report = {"tool": "hjkit", "command": args.command, "status": "ok",
              "exit_code": 0}
    try:
        pf = None
        if args.command != "fixtures":
            pf = _load(args)
            import os
            report["problem"] = os.path.basename(args.problem)
        status, payload, code = HANDLERS[args.command](pf, args)
        report["status"] = status
        report["exit_code"] = code
        report.update(payload)
    except (UsageError, ParseError, ExprError, JetError, NumericError) as exc:
        report["status"] = "error"
        report["exit_code"] = 2
        report["error"] = str(exc)
    if args.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True, default=str))
    else:
        if report["status"] == "error":
            print(f"hjkit {args.command}: error: {report['error']}", file=sys.stderr)
        else:
            print(_render_text(report))
    return report["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
