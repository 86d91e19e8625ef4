"""Generalized Hamilton-Jacobi equations of a solved PDE system.

For a system of order k and a holonomic connection of order s < k, the HJ
system consists of one expression per rule: the rule's defining function
composed with the iterated covariant derivatives of the connection.  A
candidate connection solves the HJ problem iff it is flat and every
composed expression vanishes identically (containment of the associated
finite-dimensional subdiffiety in the equation).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import sympy as sp
from sympy.core.function import AppliedUndef

from .connection import FlatnessReport, HolonomicConnection, is_flat
from .exprs import (Expression, Verdict, canonicalize, format_expr, is_zero,
                    latex_expr)
from .jet import Bundle, JetError, JetVar, SolvedPde, multi_indices, multi_indices_upto


def synthesize_ansatz(bundle: Bundle, s: int, prefix: str = "hjc") -> HolonomicConnection:
    """Generic order-s connection: one unknown function per coefficient slot,
    each depending on the base variables and the jet coordinates of order <= s."""
    args = list(bundle.base_symbols)
    for I in multi_indices_upto(bundle.n, s):
        for alpha in range(bundle.m):
            args.append(bundle.jet_symbol(JetVar(alpha, I)))
    coeffs = {}
    for alpha in range(bundle.m):
        for M in multi_indices(bundle.n, s + 1):
            jv = JetVar(alpha, M)
            fname = f"{prefix}_{bundle.jet_name(jv)}"
            coeffs[jv] = sp.Function(fname)(*args)
    return HolonomicConnection(bundle, s, coeffs, name=f"{prefix}(order {s})")


@dataclass
class HjSystem:
    system: SolvedPde
    connection: HolonomicConnection
    order: int  # s
    equations: list  # (rule JetVar, Expression)

    def describe(self):
        b = self.system.bundle
        return [(b.jet_name(jv), format_expr(e)) for jv, e in self.equations]

    def to_dict(self):
        b = self.system.bundle
        return {
            "order": self.order,
            "connection": self.connection.name,
            "equations": [{"rule": b.jet_name(jv), "expression": format_expr(e),
                           "latex": latex_expr(e)} for jv, e in self.equations],
        }


def generate_hj_system(S: SolvedPde, s: int,
                       ansatz: HolonomicConnection | None = None) -> HjSystem:
    """HJ system of order s for S: per rule, nabla_K u^a minus the pullback
    of the right-hand side, with unknown coefficients left formal.

    Flatness of the ansatz is a separate condition imposed afterwards, so the
    iterated covariant derivatives here use the canonical index order.
    """
    k = max(jv.order for jv in S.rules)
    k = max(k, S.order)
    if not 0 <= s <= k - 1:
        raise JetError(f"connection order must satisfy 0 <= s <= {k - 1}, got {s}")
    C = ansatz if ansatz is not None else synthesize_ansatz(S.bundle, s)
    if C.order != s:
        raise JetError(f"ansatz has order {C.order}, expected {s}")
    eqs = []
    for jv, rhs in S.rule_items():
        lhs = C.nabla_jet(jv, allow_unchecked=True)
        e = canonicalize(lhs - C.pullback_prolongation(rhs, allow_unchecked=True))
        eqs.append((jv, e))
    return HjSystem(S, C, s, eqs)


def substitute_unknown(e: Expression, app: Expression, value: Expression) -> Expression:
    """Replace an unknown-function application and all its formal derivatives
    by a concrete expression (derivatives become derivatives of the value)."""
    e = e.replace(
        lambda n: isinstance(n, sp.Derivative) and n.expr == app,
        lambda n: sp.diff(value, *n.variables))
    return canonicalize(e.xreplace({app: value}))


@dataclass
class ComposedSystem:
    substitutions: list  # (label, solved expression)
    equations: list      # flatness expressions after substitution
    unsolved: list       # generated equations no unknown could be isolated from

    def describe(self):
        return [format_expr(e) for e in self.equations]

    def to_dict(self):
        return {
            "substitutions": [{"unknown": n, "expression": format_expr(e)}
                              for n, e in self.substitutions],
            "equations": [{"expression": format_expr(e), "latex": latex_expr(e)}
                          for e in self.equations],
            "unsolved": [format_expr(e) for e in self.unsolved],
        }


def compose_flatness(S: SolvedPde, s: int,
                     ansatz: HolonomicConnection | None = None) -> ComposedSystem:
    """Close the generated HJ system with the flatness condition: solve each
    generated relation for an unknown coefficient where possible and
    substitute into the curvature expressions."""
    from .connection import curvature

    hj = generate_hj_system(S, s, ansatz)
    flat = [c.expr for c in curvature(hj.connection)]
    subs: list[tuple[str, Expression]] = []
    unsolved = []
    pending = [e for _, e in hj.equations]
    for e in pending:
        target = None
        for app in sorted(e.atoms(AppliedUndef), key=sp.default_sort_key):
            if e.has(sp.Derivative(app, app.args[0])) or any(
                    isinstance(d, sp.Derivative) and d.expr == app
                    for d in e.atoms(sp.Derivative)):
                continue
            if sp.degree(sp.Poly(e, app)) == 1:
                target = app
                break
        if target is None:
            unsolved.append(e)
            continue
        sols = sp.solve(e, target)
        if len(sols) != 1:
            unsolved.append(e)
            continue
        value = canonicalize(sols[0])
        subs.append((target.func.__name__, value))
        flat = [substitute_unknown(f, target, value) for f in flat]
        unsolved = [substitute_unknown(u, target, value) for u in unsolved]
    return ComposedSystem(subs, [canonicalize(f) for f in flat], unsolved)


@dataclass
class HjSolutionReport:
    flatness: FlatnessReport
    containment: list  # (rule name, Expression, Verdict)
    passed: bool

    def to_dict(self):
        return {
            "passed": self.passed,
            "flatness": self.flatness.to_dict(),
            "containment": [
                {"rule": name, "expression": format_expr(e), **v.to_dict()}
                for name, e, v in self.containment],
        }


def check_hj_solution(S: SolvedPde, C: HolonomicConnection,
                      policy=None) -> HjSolutionReport:
    """Flatness plus containment: each rule pulled back through the
    connection must vanish identically on the order-s jet space."""
    k = max(max(jv.order for jv in S.rules), S.order)
    if C.order >= k:
        raise JetError("the connection's order must be below the system's order")
    flat = is_flat(C, policy)
    checks = []
    ok = flat.passed
    for jv, rhs in S.rule_items():
        e = canonicalize(C.nabla_jet(jv, allow_unchecked=True)
                         - C.pullback_prolongation(rhs, allow_unchecked=True))
        v = is_zero(e, policy)
        ok = ok and v.is_zero
        checks.append((S.bundle.jet_name(jv), e, v))
    return HjSolutionReport(flat, checks, ok)


def report_latex(obj) -> str:
    """Render a generated system, composition, or check report for docs."""
    lines = []
    if isinstance(obj, HjSystem):
        lines.append(r"\begin{align*}")
        for jv, e in obj.equations:
            lines.append(latex_expr(e) + r" &= 0 \\")
        lines.append(r"\end{align*}")
    elif isinstance(obj, ComposedSystem):
        for name, e in obj.substitutions:
            lines.append(rf"{name} = {latex_expr(e)} \\")
        lines.append(r"\begin{align*}")
        for e in obj.equations:
            lines.append(latex_expr(e) + r" &= 0 \\")
        lines.append(r"\end{align*}")
    elif isinstance(obj, HjSolutionReport):
        lines.append(r"\textbf{flatness}: " + ("pass" if obj.flatness.passed else "fail"))
        for lbl, e, v in obj.containment:
            lines.append(rf"{latex_expr(e)} = 0 \quad\text{{[{v.kind}]}} \\")
        lines.append(r"\textbf{verdict}: " + ("solution" if obj.passed else "not a solution"))
    else:
        raise TypeError(f"cannot render {type(obj).__name__}")
    return "\n".join(lines)
