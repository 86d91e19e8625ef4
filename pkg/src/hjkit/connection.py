"""Holonomic connections in a jet bundle of order k.

A connection is stored as its top-order coefficient family: one expression
per dependent variable and per unordered multi-index M with |M| = k+1.
Keying by the unordered M is what makes the connection holonomic.  Flatness
is the vanishing of all commutators [nabla_i, nabla_j]; iterated covariant
derivatives and the prolongation pullback require flatness to have been
checked or attested.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import sympy as sp

from .exprs import Expression, Verdict, canonicalize, format_expr, is_zero
from .jet import Bundle, JetError, JetVar, MultiIndex, multi_indices

FLAT_CHECKED_EXACT = "checked-exact"
FLAT_CHECKED_PROBABILISTIC = "checked-probabilistic"
FLAT_ATTESTED = "attested"


class FlatnessError(JetError):
    pass


@dataclass
class HolonomicConnection:
    bundle: Bundle
    order: int  # k
    coeffs: dict[JetVar, Expression]  # keyed by (alpha, M), |M| = k+1
    name: str = ""
    flatness: str | None = None

    def __post_init__(self):
        b, k = self.bundle, self.order
        if k < 0:
            raise JetError("connection order must be non-negative")
        want = {JetVar(alpha, M) for alpha in range(b.m)
                for M in multi_indices(b.n, k + 1)}
        have = set(self.coeffs)
        if have != want:
            missing = sorted(b.jet_name(jv) for jv in want - have)
            extra = sorted(b.jet_name(jv) for jv in have - want)
            parts = []
            if missing:
                parts.append(f"missing slots: {', '.join(missing)}")
            if extra:
                parts.append(f"unexpected slots: {', '.join(extra)}")
            raise JetError("incomplete connection coefficients (" + "; ".join(parts) + ")")
        for jv, e in self.coeffs.items():
            b.validate_expression(e, max_order=k,
                                  what=f"connection coefficient {b.jet_name(jv)}")
        self._nab_cache: dict[JetVar, Expression] = {}

    # -- flatness bookkeeping ----------------------------------------------
    def attest_flat(self):
        """Caller vouches for flatness without a computation."""
        if self.flatness is None:
            self.flatness = FLAT_ATTESTED

    def require_flat(self, allow_unchecked: bool = False):
        if self.flatness is None and not allow_unchecked:
            raise FlatnessError(
                "flatness has not been established; run is_flat() or attest_flat()")

    # -- covariant derivative ----------------------------------------------
    def nabla_apply(self, e: Expression, i: int) -> Expression:
        """nabla_i e on expressions of order <= k."""
        b, k = self.bundle, self.order
        if b.order_of(e) > k:
            raise JetError(f"expression has order {b.order_of(e)} > connection order {k}")
        out = sp.diff(e, b.base_symbol(i))
        for sym, jv in b.jet_vars_in(e).items():
            up = JetVar(jv.alpha, jv.idx.inc(i))
            lift = self.coeffs[up] if jv.order == k else b.jet_symbol(up)
            out += lift * sp.diff(e, sym)
        return canonicalize(out)

    def nabla_jet(self, jv: JetVar, allow_unchecked: bool = False) -> Expression:
        """nabla_I u^a, iterated in canonical index order (flatness makes the
        order irrelevant)."""
        b, k = self.bundle, self.order
        if jv.order > k:
            self.require_flat(allow_unchecked)
        if jv in self._nab_cache:
            return self._nab_cache[jv]
        if jv.order <= k:
            e = b.jet_symbol(jv)
        elif jv.order == k + 1:
            e = self.coeffs[jv]
        else:
            i = max(jv.idx.support())
            e = self.nabla_apply(self.nabla_jet(JetVar(jv.alpha, jv.idx.dec(i)),
                                                allow_unchecked), i)
        self._nab_cache[jv] = e
        return e

    def nabla_iterated(self, e: Expression, I: MultiIndex,
                       allow_unchecked: bool = False) -> Expression:
        if I.order > 0:
            self.require_flat(allow_unchecked)
        for i in I.iter_indices():
            e = self.nabla_apply(e, i)
        return e

    def pullback_prolongation(self, e: Expression,
                              allow_unchecked: bool = False) -> Expression:
        """Substitute nabla_I u^a for every jet coordinate of order > k."""
        b, k = self.bundle, self.order
        subs = {}
        for sym, jv in b.jet_vars_in(e).items():
            if jv.order > k:
                self.require_flat(allow_unchecked)
                subs[sym] = self.nabla_jet(jv, allow_unchecked)
        if not subs:
            return canonicalize(e)
        return canonicalize(e.subs(subs, simultaneous=True))

    def describe(self) -> list[tuple[str, str]]:
        items = sorted(self.coeffs.items(), key=lambda kv: (kv[0].alpha, kv[0].idx.sort_key))
        return [(self.bundle.jet_name(jv), format_expr(e)) for jv, e in items]

    def mutated(self, slot: JetVar, delta: Expression = sp.Integer(1),
                name: str | None = None) -> "HolonomicConnection":
        """Copy with one coefficient perturbed (negative-control helper)."""
        coeffs = dict(self.coeffs)
        coeffs[slot] = canonicalize(coeffs[slot] + delta)
        return HolonomicConnection(self.bundle, self.order, coeffs,
                                   name=name or (self.name + "+1"))


@dataclass(frozen=True)
class CurvatureComponent:
    alpha: int
    I: MultiIndex  # |I| = k
    i: int
    j: int
    expr: Expression

    def label(self, bundle: Bundle) -> str:
        body = bundle.jet_name(JetVar(self.alpha, self.I))
        return f"[{body}; {bundle.base[self.i]},{bundle.base[self.j]}]"


def curvature(C: HolonomicConnection) -> list[CurvatureComponent]:
    """Commutator coefficients on the top-order coordinates:
    nabla_i C^a_{Ij} - nabla_j C^a_{Ii} for i < j.  Lower-order components
    vanish identically by holonomy (covered by a unit test, not recomputed).
    """
    b, k = C.bundle, C.order
    out = []
    for alpha in range(b.m):
        for I in multi_indices(b.n, k):
            for i in range(b.n):
                for j in range(i + 1, b.n):
                    e = canonicalize(
                        C.nabla_apply(C.coeffs[JetVar(alpha, I.inc(j))], i)
                        - C.nabla_apply(C.coeffs[JetVar(alpha, I.inc(i))], j))
                    out.append(CurvatureComponent(alpha, I, i, j, e))
    return out


@dataclass
class FlatnessReport:
    connection: str
    components: list  # (label, expr, Verdict)
    passed: bool
    basis: str

    def to_dict(self):
        return {
            "connection": self.connection,
            "passed": self.passed,
            "basis": self.basis,
            "components": [
                {"component": lbl, "expression": format_expr(e), **v.to_dict()}
                for lbl, e, v in self.components],
        }


def is_flat(C: HolonomicConnection, policy=None) -> FlatnessReport:
    comps = curvature(C)
    checks = []
    ok = True
    exact = True
    for comp in comps:
        v = is_zero(comp.expr, policy)
        ok = ok and v.is_zero
        exact = exact and v.kind == "zero-exact"
        checks.append((comp.label(C.bundle), comp.expr, v))
    if ok:
        C.flatness = FLAT_CHECKED_EXACT if exact else FLAT_CHECKED_PROBABILISTIC
    basis = C.flatness if ok else "not-flat"
    return FlatnessReport(C.name or "<connection>", checks, ok, basis)
