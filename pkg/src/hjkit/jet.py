"""Jet-space bookkeeping.

Bundles name the coordinates; multi-indices are unordered exponent vectors
over the base variables; jet coordinates u^a_I are plain symbols with
canonical names like ``u_txx``.  Total derivatives, system prolongation and
Lie-field prolongation live here, together with the substitution engine that
reduces expressions modulo a solved (orthonomic) system.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import sympy as sp

from .exprs import (ExprError, Expression, SymbolTable, canonicalize,
                    differentiate, format_expr)

DEFAULT_ORDER_CAP = 12
DEFAULT_REDUCTION_BUDGET = 20000


class JetError(ExprError):
    pass


class OrderCapError(JetError):
    pass


class NonOrthonomicError(JetError):
    pass


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Unordered multi-index as an exponent vector over the base variables."""

    exps: tuple[int, ...]

    @property
    def order(self) -> int:
        return sum(self.exps)

    def inc(self, i: int) -> "MultiIndex":
        e = list(self.exps)
        e[i] += 1
        return MultiIndex(tuple(e))

    def dec(self, i: int) -> "MultiIndex":
        if self.exps[i] == 0:
            raise JetError(f"cannot decrement index {i} of {self.exps}")
        e = list(self.exps)
        e[i] -= 1
        return MultiIndex(tuple(e))

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a + b for a, b in zip(self.exps, other.exps)))

    def covers(self, other: "MultiIndex") -> bool:
        return all(a >= b for a, b in zip(self.exps, other.exps))

    def minus(self, other: "MultiIndex") -> "MultiIndex":
        if not self.covers(other):
            raise JetError("multi-index subtraction out of range")
        return MultiIndex(tuple(a - b for a, b in zip(self.exps, other.exps)))

    def support(self) -> list[int]:
        return [i for i, a in enumerate(self.exps) if a > 0]

    def decompositions(self) -> list[tuple["MultiIndex", int]]:
        """All (J, i) with Ji = self, one per distinct i in the support."""
        return [(self.dec(i), i) for i in self.support()]

    def iter_indices(self) -> list[int]:
        """Canonical expansion into single indices."""
        out = []
        for i, a in enumerate(self.exps):
            out.extend([i] * a)
        return out

    @property
    def sort_key(self):
        return (self.order, self.exps)


def multi_indices(n: int, order: int) -> list[MultiIndex]:
    """All multi-indices over n variables of exactly the given order."""
    out = []
    for combo in itertools.combinations_with_replacement(range(n), order):
        e = [0] * n
        for i in combo:
            e[i] += 1
        out.append(MultiIndex(tuple(e)))
    return sorted(out)


def multi_indices_upto(n: int, order: int) -> list[MultiIndex]:
    out = []
    for d in range(order + 1):
        out.extend(multi_indices(n, d))
    return out


def multinomial(I: MultiIndex, J: MultiIndex) -> int:
    """prod_i C(a_i + b_i, b_i) for the exponent vectors of I and J."""
    return math.prod(math.comb(a + b, b) for a, b in zip(I.exps, J.exps))


@dataclass(frozen=True, order=True)
class JetVar:
    alpha: int
    idx: MultiIndex

    @property
    def order(self) -> int:
        return self.idx.order


@dataclass(frozen=True)
class Bundle:
    """Fibered coordinates: base x^i, dependents u^a, declared parameters."""

    base: tuple[str, ...]
    deps: tuple[str, ...]
    params: tuple[str, ...] = ()
    order_cap: int = DEFAULT_ORDER_CAP

    def __post_init__(self):
        names = list(self.base) + list(self.deps) + list(self.params)
        if len(self.base) < 1 or len(self.deps) < 1:
            raise JetError("a bundle needs at least one base and one dependent variable")
        for n in names:
            if not n.isidentifier() or "_" in n:
                raise JetError(f"invalid coordinate name '{n}' (identifiers without '_')")
        if len(set(names)) != len(names):
            raise JetError("coordinate names must be unique")

    # -- symbols ----------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.base)

    @property
    def m(self) -> int:
        return len(self.deps)

    def base_symbol(self, i: int) -> sp.Symbol:
        return sp.Symbol(self.base[i])

    @property
    def base_symbols(self) -> tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(n) for n in self.base)

    @property
    def param_symbols(self) -> tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(n) for n in self.params)

    def zero_index(self) -> MultiIndex:
        return MultiIndex((0,) * self.n)

    def mi(self, letters: str = "") -> MultiIndex:
        """Multi-index from a letter string like 'xxt' (order irrelevant)."""
        e = [0] * self.n
        for ch in letters:
            if ch not in self.base:
                raise JetError(f"'{ch}' is not a base variable")
            e[self.base.index(ch)] += 1
        return MultiIndex(tuple(e))

    def letters(self, I: MultiIndex) -> str:
        return "".join(self.base[i] * a for i, a in enumerate(I.exps))

    def jet(self, dep: str, letters: str = "") -> JetVar:
        if dep not in self.deps:
            raise JetError(f"'{dep}' is not a dependent variable")
        return JetVar(self.deps.index(dep), self.mi(letters))

    def jet_name(self, jv: JetVar) -> str:
        s = self.deps[jv.alpha]
        lt = self.letters(jv.idx)
        return f"{s}_{lt}" if lt else s

    def jet_symbol(self, jv: JetVar) -> sp.Symbol:
        if jv.order > self.order_cap:
            raise OrderCapError(
                f"jet order {jv.order} exceeds the order cap {self.order_cap}")
        return sp.Symbol(self.jet_name(jv))

    def parse_jet_name(self, name: str) -> JetVar | None:
        head, _, tail = name.partition("_")
        if head not in self.deps:
            return None
        if tail == "" and "_" not in name:
            return JetVar(self.deps.index(head), self.zero_index())
        if not tail:
            return None
        e = [0] * self.n
        for ch in tail:
            if ch not in self.base:
                return None
            e[self.base.index(ch)] += 1
        return JetVar(self.deps.index(head), MultiIndex(tuple(e)))

    def classify(self, sym: sp.Symbol):
        name = sym.name
        if name in self.base:
            return ("base", self.base.index(name))
        if name in self.params:
            return ("param", name)
        jv = self.parse_jet_name(name)
        if jv is not None:
            return ("jet", jv)
        return None

    def jet_vars_in(self, e: Expression) -> dict[sp.Symbol, JetVar]:
        out = {}
        for s in e.free_symbols:
            kind = self.classify(s)
            if kind and kind[0] == "jet":
                out[s] = kind[1]
        return out

    def order_of(self, e: Expression) -> int:
        jvs = self.jet_vars_in(e)
        return max((jv.order for jv in jvs.values()), default=0)

    def validate_expression(self, e: Expression, max_order: int | None = None,
                            what: str = "expression"):
        for s in e.free_symbols:
            if self.classify(s) is None:
                raise JetError(f"{what} uses undeclared symbol '{s.name}'")
        if max_order is not None and self.order_of(e) > max_order:
            raise JetError(
                f"{what} has jet order {self.order_of(e)} > {max_order}")

    def symbol_table(self) -> SymbolTable:
        table = SymbolTable(fallback=self._resolve)
        for n in self.base + self.params:
            table.symbols[n] = sp.Symbol(n)
        return table

    def _resolve(self, name: str) -> sp.Symbol | None:
        jv = self.parse_jet_name(name)
        if jv is None:
            return None
        return self.jet_symbol(jv)


# ---------------------------------------------------------------------------
# total derivatives


def total_derivative(bundle: Bundle, e: Expression, i: int,
                     order_cap: int | None = None) -> Expression:
    """D_i e: the base partial plus u^a_{Ii} times the jet partials."""
    cap = bundle.order_cap if order_cap is None else order_cap
    out = sp.diff(e, bundle.base_symbol(i))
    for sym, jv in bundle.jet_vars_in(e).items():
        up = JetVar(jv.alpha, jv.idx.inc(i))
        if up.order > cap:
            raise OrderCapError(
                f"total derivative would exceed jet order cap {cap}")
        out += bundle.jet_symbol(up) * sp.diff(e, sym)
    return canonicalize(out)


def total_derivative_multi(bundle: Bundle, e: Expression, I: MultiIndex,
                           order_cap: int | None = None) -> Expression:
    for i in I.iter_indices():
        e = total_derivative(bundle, e, i, order_cap)
    return e


# ---------------------------------------------------------------------------
# solved systems


@dataclass(frozen=True)
class SolvedPde:
    """PDE system in solved form: leading jet coordinates = lower expressions.

    Right-hand sides may not contain any leading coordinate nor any of its
    total-derivative descendants, so 'holds on the equation' is plain
    substitution.
    """

    bundle: Bundle
    rules: Mapping[JetVar, Expression]
    order: int = 0

    def __post_init__(self):
        rules = dict(self.rules)
        object.__setattr__(self, "rules", rules)
        if not rules:
            raise JetError("a solved system needs at least one rule")
        k = 0
        for jv, rhs in rules.items():
            self.bundle.validate_expression(rhs, what=f"rule for {self.bundle.jet_name(jv)}")
            k = max(k, jv.order, self.bundle.order_of(rhs))
        object.__setattr__(self, "order", max(self.order, k))
        for jv, rhs in rules.items():
            for sym, v in self.bundle.jet_vars_in(rhs).items():
                if self.leading_for(v) is not None:
                    raise NonOrthonomicError(
                        f"right-hand side of {self.bundle.jet_name(jv)} contains "
                        f"'{sym}', a derivative of a leading coordinate")

    def leading_for(self, jv: JetVar) -> JetVar | None:
        """The closest leading coordinate that jv prolongs, if any."""
        best = None
        for lead in self.rules:
            if lead.alpha == jv.alpha and jv.idx.covers(lead.idx):
                if best is None or lead.idx.order > best.idx.order:
                    best = lead
        return best

    def rule_items(self):
        return sorted(self.rules.items(), key=lambda kv: (kv[0].alpha, kv[0].idx.sort_key))

    def describe(self) -> list[tuple[str, str]]:
        return [(self.bundle.jet_name(jv), format_expr(rhs))
                for jv, rhs in self.rule_items()]


class PdeContext:
    """Reduction engine: derived rules for every principal coordinate, with
    memoization and a substitution budget guarding non-orthonomic inputs."""

    def __init__(self, system: SolvedPde, order_cap: int | None = None,
                 budget: int = DEFAULT_REDUCTION_BUDGET):
        self.system = system
        self.bundle = system.bundle
        self.cap = self.bundle.order_cap if order_cap is None else order_cap
        self.budget = budget
        self._steps = 0
        self._rules: dict[JetVar, Expression] = {}

    def _spend(self):
        self._steps += 1
        if self._steps > self.budget:
            raise NonOrthonomicError(
                "reduction did not terminate within the substitution budget; "
                "the system does not appear to be orthonomic")

    def rule_for(self, jv: JetVar) -> Expression:
        if jv in self._rules:
            return self._rules[jv]
        self._spend()
        lead = self.system.leading_for(jv)
        if lead is None:
            raise JetError(f"{self.bundle.jet_name(jv)} is not a principal coordinate")
        gap = jv.idx.minus(lead.idx)
        if gap.order == 0:
            rhs = canonicalize(self.system.rules[lead])
        else:
            i = max(gap.support())  # later base axes first keeps reductions short
            below = self.rule_for(JetVar(jv.alpha, jv.idx.dec(i)))
            rhs = self.reduce(total_derivative(self.bundle, below, i, self.cap))
        self._rules[jv] = rhs
        return rhs

    def reduce(self, e: Expression) -> Expression:
        """Substitute away every principal jet coordinate in ``e``."""
        while True:
            subs = {}
            for sym, jv in self.bundle.jet_vars_in(e).items():
                if self.system.leading_for(jv) is not None:
                    self._spend()
                    subs[sym] = self.rule_for(jv)
            if not subs:
                return canonicalize(e)
            e = e.subs(subs, simultaneous=True)


def prolong_system(S: SolvedPde, r: int, order_cap: int | None = None) -> SolvedPde:
    """All rules u^a_{KJ} = reduced D_J(rhs), |J| <= r."""
    if r < 0:
        raise JetError("prolongation order must be non-negative")
    if r == 0:
        return S
    ctx = PdeContext(S, order_cap)
    out: dict[JetVar, Expression] = {}
    for lead in sorted(S.rules, key=lambda jv: (jv.alpha, jv.idx.sort_key)):
        for J in multi_indices_upto(S.bundle.n, r):
            jv = JetVar(lead.alpha, lead.idx + J)
            if jv not in out:
                out[jv] = ctx.rule_for(jv)
    return SolvedPde(S.bundle, out)


# ---------------------------------------------------------------------------
# Lie point fields


@dataclass(frozen=True)
class LieField:
    """Point field X^i d/dx^i + Y^a d/du^a with components on the total space."""

    bundle: Bundle
    X: tuple[Expression, ...]
    Y: tuple[Expression, ...]

    def __post_init__(self):
        if len(self.X) != self.bundle.n or len(self.Y) != self.bundle.m:
            raise JetError("component count does not match the bundle")
        for c in list(self.X) + list(self.Y):
            self.bundle.validate_expression(c, max_order=0, what="Lie field component")

    def characteristics(self) -> list[Expression]:
        """Q^a = Y^a - u^a_i X^i."""
        b = self.bundle
        out = []
        for alpha in range(b.m):
            q = self.Y[alpha]
            for i in range(b.n):
                q = q - b.jet_symbol(JetVar(alpha, b.zero_index().inc(i))) * self.X[i]
            out.append(canonicalize(q))
        return out


@dataclass(frozen=True)
class ProlongedLieField:
    field: LieField
    order: int
    coeffs: Mapping[JetVar, Expression]  # coefficient of d/du^a_I, |I| < order


def prolong_lie_field(Y: LieField, r: int) -> ProlongedLieField:
    """Coefficients X^i u^a_{Ii} + D_I(Y^a - u^a_i X^i) for every |I| < r."""
    if r < 1:
        raise JetError("prolongation order must be at least 1")
    b = Y.bundle
    qs = Y.characteristics()
    coeffs: dict[JetVar, Expression] = {}
    dq: dict[JetVar, Expression] = {}
    for alpha in range(b.m):
        dq[JetVar(alpha, b.zero_index())] = qs[alpha]
    for I in multi_indices_upto(b.n, r - 1):
        for alpha in range(b.m):
            jv = JetVar(alpha, I)
            if jv not in dq:
                i = max(I.support())
                below = dq[JetVar(alpha, I.dec(i))]
                dq[jv] = total_derivative(b, below, i)
            transport = sp.Add(*[
                Y.X[i] * b.jet_symbol(JetVar(alpha, I.inc(i))) for i in range(b.n)])
            coeffs[jv] = canonicalize(transport + dq[jv])
    return ProlongedLieField(Y, r, coeffs)


def apply_lie_field(Y: LieField, e: Expression) -> Expression:
    """Prolonged action on a jet expression: X^i D_i e + D_I(Q^a) de/du^a_I."""
    b = Y.bundle
    out = sp.Add(*[Y.X[i] * total_derivative(b, e, i) for i in range(b.n)])
    qs = Y.characteristics()
    dq_cache: dict[JetVar, Expression] = {
        JetVar(alpha, b.zero_index()): qs[alpha] for alpha in range(b.m)}

    def dq(jv: JetVar) -> Expression:
        if jv not in dq_cache:
            i = max(jv.idx.support())
            dq_cache[jv] = total_derivative(b, dq(JetVar(jv.alpha, jv.idx.dec(i))), i)
        return dq_cache[jv]

    for sym, jv in b.jet_vars_in(e).items():
        out += dq(jv) * sp.diff(e, sym)
    return canonicalize(out)


@dataclass
class SymmetryReport:
    per_rule: list  # (rule name, Verdict)
    passed: bool

    def to_dict(self):
        return {
            "passed": self.passed,
            "rules": [{"rule": name, **v.to_dict()} for name, v in self.per_rule],
        }


def is_lie_symmetry(Y: LieField, S: SolvedPde, policy=None) -> SymmetryReport:
    """Apply the prolonged field to each rule's defining function and reduce
    modulo the system; the field is a symmetry iff every result vanishes."""
    from .exprs import is_zero
    ctx = PdeContext(S)
    checks = []
    ok = True
    for jv, rhs in S.rule_items():
        g = S.bundle.jet_symbol(jv) - rhs
        val = ctx.reduce(apply_lie_field(Y, g))
        verdict = is_zero(val, policy)
        ok = ok and verdict.is_zero
        checks.append((S.bundle.jet_name(jv), verdict))
    return SymmetryReport(checks, ok)
