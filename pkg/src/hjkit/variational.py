"""Local variational calculus for higher-order Lagrangian densities.

Euler-Lagrange derivatives, momentum coefficient families realizing the
first variation identity, Hamiltonian density with formal momentum symbols,
the first constraint equations, the three-block field-Hamilton system, and
the generalized HJ problem checker (flatness + constraint membership +
momentum balance pulled back through the connection).

Sign and multiplicity conventions are pinned by one oracle: the first
variation defect of the canonical momentum family must vanish identically.
The family itself is built by a top-down recursion that makes this hold by
construction; see docs/conventions.md.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import sympy as sp

from .connection import FlatnessReport, HolonomicConnection, is_flat
from .exprs import Expression, Verdict, canonicalize, format_expr, is_zero
from .hj import HjSolutionReport, check_hj_solution
from .jet import (Bundle, JetError, JetVar, MultiIndex, SolvedPde,
                  multi_indices, multi_indices_upto, total_derivative,
                  total_derivative_multi)

_MOMENTUM_LETTERS = "pqrsPQRS"


class VariationalError(JetError):
    pass


@dataclass(frozen=True)
class Lagrangian:
    """Density L on the jet space of order k+1 (k = momentum index range)."""

    bundle: Bundle
    density: Expression
    order: int = 0  # k+1; defaults to max(1, jet order of the density)

    def __post_init__(self):
        self.bundle.validate_expression(self.density, what="Lagrangian density")
        k1 = max(self.order, self.bundle.order_of(self.density), 1)
        object.__setattr__(self, "order", k1)

    @property
    def k(self) -> int:
        return self.order - 1


def euler_lagrange(Lg: Lagrangian) -> list[Expression]:
    """delta L / delta u^a = sum_I (-1)^|I| D_I(dL/du^a_I), one per dependent."""
    b, L = Lg.bundle, Lg.density
    out = []
    for alpha in range(b.m):
        total = sp.S.Zero
        for sym, jv in b.jet_vars_in(L).items():
            if jv.alpha != alpha:
                continue
            term = total_derivative_multi(b, sp.diff(L, sym), jv.idx)
            total += (-1) ** jv.order * term
        out.append(canonicalize(total))
    return out


@dataclass(frozen=True)
class MomentumSection:
    """Coefficient family T^{I.i}_a over |I| <= order, complete (zeros included)."""

    bundle: Bundle
    order: int  # k
    coeffs: Mapping[tuple[int, MultiIndex, int], Expression]

    def __post_init__(self):
        b, k = self.bundle, self.order
        coeffs = dict(self.coeffs)
        want = {(alpha, I, i) for alpha in range(b.m)
                for I in multi_indices_upto(b.n, k) for i in range(b.n)}
        extra = set(coeffs) - want
        if extra:
            raise VariationalError(f"momentum slots out of range: {sorted(extra)[:3]}")
        for key in want - set(coeffs):
            coeffs[key] = sp.S.Zero
        for (alpha, I, i), e in coeffs.items():
            b.validate_expression(e, what=f"momentum coefficient {self.slot_name(alpha, I, i)}")
        object.__setattr__(self, "coeffs", coeffs)

    def slot_name(self, alpha: int, I: MultiIndex, i: int) -> str:
        b = self.bundle
        jet = b.jet_name(JetVar(alpha, I))
        return f"{jet}.{b.base[i]}"

    def coefficient(self, alpha: int, I: MultiIndex, i: int) -> Expression:
        return self.coeffs.get((alpha, I, i), sp.S.Zero)

    def max_coeff_order(self) -> int:
        return max((self.bundle.order_of(e) for e in self.coeffs.values()), default=0)

    def shifted(self, deltas: Mapping[tuple[int, MultiIndex, int], Expression]) -> "MomentumSection":
        coeffs = dict(self.coeffs)
        for key, d in deltas.items():
            coeffs[key] = canonicalize(coeffs.get(key, sp.S.Zero) + d)
        return MomentumSection(self.bundle, self.order, coeffs)

    def pulled_onto(self, C: HolonomicConnection) -> "MomentumSection":
        """Compose the coefficients with the connection's prolongation map so
        they become functions on the order-k jet space."""
        coeffs = {key: C.pullback_prolongation(e)
                  for key, e in self.coeffs.items()}
        return MomentumSection(self.bundle, self.order, coeffs)

    def describe(self) -> list[tuple[str, str]]:
        items = sorted(self.coeffs.items(),
                       key=lambda kv: (kv[0][0], kv[0][1].sort_key, kv[0][2]))
        return [(self.slot_name(*key), format_expr(e)) for key, e in items]


def legendre_local(Lg: Lagrangian) -> MomentumSection:
    """Canonical momentum family: built top-down so the first variation
    defect vanishes identically.

    At top order the coordinate partial dL/du_K is distributed over the
    decompositions K = Ji with weight K_i/|K|; below, the distributed
    remainder is dL/du_K minus the total divergence of the slots above.
    """
    b, L, k = Lg.bundle, Lg.density, Lg.k
    coeffs: dict[tuple[int, MultiIndex, int], Expression] = {}
    for alpha in range(b.m):
        for d in range(k + 1, 0, -1):
            for K in multi_indices(b.n, d):
                jet_sym = b.jet_symbol(JetVar(alpha, K))
                r = sp.diff(L, jet_sym)
                if d <= k:
                    for i in range(b.n):
                        t = coeffs.get((alpha, K, i), sp.S.Zero)
                        r -= total_derivative(b, t, i)
                r = canonicalize(r)
                for J, i in K.decompositions():
                    share = sp.Rational(K.exps[i], K.order)
                    prev = coeffs.get((alpha, J, i), sp.S.Zero)
                    coeffs[(alpha, J, i)] = canonicalize(prev + share * r)
    return MomentumSection(b, k, coeffs)


def first_variation_defect(Lg: Lagrangian, T: MomentumSection) -> list[tuple]:
    """Defects of the first variation identity, one per (alpha, |I| <= k+1):

        [I = 0]*deltaL/du^a - dL/du^a_I + D_i T^{I.i}_a + sum_{Ji=I} T^{J.i}_a

    T is a Legendre family for the density iff all defects vanish.
    """
    b, L, k = Lg.bundle, Lg.density, Lg.k
    el = euler_lagrange(Lg)
    out = []
    for alpha in range(b.m):
        for I in multi_indices_upto(b.n, k + 1):
            d = sp.S.Zero
            if I.order == 0:
                d += el[alpha]
            d -= sp.diff(L, b.jet_symbol(JetVar(alpha, I)))
            if I.order <= k:
                for i in range(b.n):
                    d += total_derivative(b, T.coefficient(alpha, I, i), i)
            for J, i in I.decompositions():
                d += T.coefficient(alpha, J, i)
            out.append(((alpha, I), canonicalize(d)))
    return out


def divergence_shift(Lg: Lagrangian, eta: list[Expression]):
    """Equivalent data for the density L + D_i eta^i: the new Lagrangian and
    the momentum shift T^{I.i} += d(eta^i)/du^a_I (vertical differential of
    the boundary term).  eta must have order <= k."""
    b, k = Lg.bundle, Lg.k
    if len(eta) != b.n:
        raise VariationalError("one boundary component per base variable")
    for e in eta:
        b.validate_expression(e, max_order=k, what="boundary term")
    L2 = canonicalize(Lg.density + sp.Add(*[
        total_derivative(b, eta[i], i) for i in range(b.n)]))
    deltas = {}
    for alpha in range(b.m):
        for I in multi_indices_upto(b.n, k):
            for i in range(b.n):
                d = sp.diff(eta[i], b.jet_symbol(JetVar(alpha, I)))
                if d != 0:
                    deltas[(alpha, I, i)] = d
    return Lagrangian(b, L2, Lg.order), deltas


# ---------------------------------------------------------------------------
# momenta as formal symbols


def momentum_letter(bundle: Bundle, alpha: int) -> str:
    taken = set(bundle.base) | set(bundle.deps) | set(bundle.params)
    free = [c for c in _MOMENTUM_LETTERS if c not in taken]
    if alpha >= len(free):
        raise VariationalError("ran out of momentum letters")
    return free[alpha]


def momentum_symbol(bundle: Bundle, alpha: int, I: MultiIndex, i: int) -> sp.Symbol:
    letter = momentum_letter(bundle, alpha)
    lt = bundle.letters(I)
    mid = f"_{lt}" if lt else ""
    return sp.Symbol(f"{letter}{mid}_{bundle.base[i]}")


def momentum_symbols(bundle: Bundle, k: int) -> dict[tuple[int, MultiIndex, int], sp.Symbol]:
    return {(alpha, I, i): momentum_symbol(bundle, alpha, I, i)
            for alpha in range(bundle.m)
            for I in multi_indices_upto(bundle.n, k)
            for i in range(bundle.n)}


def hamiltonian_density(Lg: Lagrangian) -> Expression:
    """E = u^a_{Ii} p^{I.i}_a - L with formal momentum symbols as parameters."""
    b, k = Lg.bundle, Lg.k
    E = -Lg.density
    for (alpha, I, i), p in momentum_symbols(b, k).items():
        E += b.jet_symbol(JetVar(alpha, I.inc(i))) * p
    return canonicalize(E)


def _delta_momentum_sum(b: Bundle, syms, alpha: int, K: MultiIndex) -> Expression:
    return sp.Add(*[syms[(alpha, J, i)] for J, i in K.decompositions()])


def constraint_equations(Lg: Lagrangian) -> list[Expression]:
    """First constraint locus: delta-sums of momenta minus dL/du^a_K, |K| = k+1."""
    b, k = Lg.bundle, Lg.k
    syms = momentum_symbols(b, k)
    out = []
    for alpha in range(b.m):
        for K in multi_indices(b.n, k + 1):
            e = _delta_momentum_sum(b, syms, alpha, K) \
                - sp.diff(Lg.density, b.jet_symbol(JetVar(alpha, K)))
            out.append(canonicalize(e))
    return out


def reduce_hamiltonian(Lg: Lagrangian) -> Expression:
    """E with the canonical momentum family substituted for the momentum
    symbols; for the shipped densities this lands on the jet coordinates and
    is independent of the leading velocities."""
    T = legendre_local(Lg)
    E = hamiltonian_density(Lg)
    subs = {momentum_symbol(Lg.bundle, alpha, I, i): T.coefficient(alpha, I, i)
            for (alpha, I, i) in momentum_symbols(Lg.bundle, Lg.k)}
    return canonicalize(E.subs(subs, simultaneous=True))


@dataclass
class ElhSystem:
    """The three blocks of the first-order field-Hamilton system."""

    lagrangian: Lagrangian
    constraints: list[Expression]                      # block I
    momentum_balance: list[tuple]                      # block II: (alpha, I, div syms, rhs)
    kinematics: list[tuple]                            # block III: (alpha, J, i, rhs sym)

    def to_dict(self):
        b = self.lagrangian.bundle
        return {
            "constraints": [format_expr(e) for e in self.constraints],
            "momentum_balance": [
                {"component": b.jet_name(JetVar(alpha, I)),
                 "divergence_of": [str(s) for s in divs],
                 "rhs": format_expr(rhs)}
                for alpha, I, divs, rhs in self.momentum_balance],
            "kinematics": [
                {"lhs": f"d({b.jet_name(JetVar(alpha, J))})/d{b.base[i]}",
                 "rhs": str(rhs)}
                for alpha, J, i, rhs in self.kinematics],
        }


def elh_system(Lg: Lagrangian) -> ElhSystem:
    b, k = Lg.bundle, Lg.k
    syms = momentum_symbols(b, k)
    balance = []
    for alpha in range(b.m):
        for I in multi_indices_upto(b.n, k):
            divs = [syms[(alpha, I, i)] for i in range(b.n)]
            rhs = canonicalize(sp.diff(Lg.density, b.jet_symbol(JetVar(alpha, I)))
                               - _delta_momentum_sum(b, syms, alpha, I))
            balance.append((alpha, I, divs, rhs))
    kin = []
    for alpha in range(b.m):
        for J in multi_indices_upto(b.n, k):
            for i in range(b.n):
                kin.append((alpha, J, i, b.jet_symbol(JetVar(alpha, J.inc(i)))))
    return ElhSystem(Lg, constraint_equations(Lg), balance, kin)


# ---------------------------------------------------------------------------
# EL equations in solved form (for cross-checks)


def el_solved(Lg: Lagrangian) -> SolvedPde:
    """Bring the Euler-Lagrange expressions to solved form by isolating, per
    component, a jet coordinate that occurs linearly with a constant
    coefficient (preferring derivatives in the first base variable, then
    higher order).  Covers the shipped fixtures; not a general solver."""
    b = Lg.bundle
    rules: dict[JetVar, Expression] = {}
    for expr in euler_lagrange(Lg):
        best = None
        for sym, jv in b.jet_vars_in(expr).items():
            coeff = sp.diff(expr, sym)
            if coeff.free_symbols or coeff == 0:
                continue
            key = (jv.idx.exps[0], jv.order, jv.idx.sort_key)
            if (best is None or key > best[0]) and jv not in rules:
                best = (key, sym, jv, coeff)
        if best is None:
            raise VariationalError(
                "could not isolate a leading coordinate in an EL component")
        _, sym, jv, coeff = best
        rules[jv] = canonicalize(sym - expr / coeff)
    return SolvedPde(b, rules)


# ---------------------------------------------------------------------------
# generalized HJ problem


@dataclass
class GeneralizedHjReport:
    flatness: FlatnessReport
    constraints: list   # (label, expr, Verdict)
    balance: list       # (label, expr, Verdict)  -- pulled-back momentum balance
    el_cross: HjSolutionReport | None
    el_consistent: bool | None
    passed: bool

    def to_dict(self):
        d = {
            "passed": self.passed,
            "flatness": self.flatness.to_dict(),
            "constraint_membership": [
                {"slot": lbl, "expression": format_expr(e), **v.to_dict()}
                for lbl, e, v in self.constraints],
            "momentum_balance": [
                {"slot": lbl, "expression": format_expr(e), **v.to_dict()}
                for lbl, e, v in self.balance],
        }
        if self.el_cross is not None:
            d["el_subdiffiety"] = self.el_cross.to_dict()
            d["el_consistent"] = self.el_consistent
        return d


def check_generalized_hj(Lg: Lagrangian, C: HolonomicConnection,
                         T: MomentumSection, policy=None,
                         cross_check: bool = True) -> GeneralizedHjReport:
    """A pair (connection, momentum family) solves the generalized HJ problem
    iff the connection is flat, its image lies in the constraint locus, and
    the momentum balance identities hold after pulling back through the
    connection.  On success the connection also defines an HJ subdiffiety of
    the EL equations, which is cross-asserted when the EL system can be
    brought to solved form."""
    b, k = Lg.bundle, Lg.k
    if C.order != k:
        raise VariationalError(f"connection order {C.order} != Lagrangian k {k}")
    if T.order != k:
        raise VariationalError(f"momentum family order {T.order} != Lagrangian k {k}")
    if T.max_coeff_order() > k:
        raise VariationalError(
            "momentum coefficients must live on the order-k jet space; "
            "use MomentumSection.pulled_onto(connection) first")
    flat = is_flat(C, policy)
    ok = flat.passed

    constraints = []
    for alpha in range(b.m):
        for K in multi_indices(b.n, k + 1):
            e = C.pullback_prolongation(
                sp.diff(Lg.density, b.jet_symbol(JetVar(alpha, K))),
                allow_unchecked=True)
            e = canonicalize(e - sp.Add(*[T.coefficient(alpha, J, i)
                                          for J, i in K.decompositions()]))
            v = is_zero(e, policy)
            ok = ok and v.is_zero
            constraints.append((T.slot_name(alpha, K, 0).split(".")[0], e, v))

    balance = []
    for alpha in range(b.m):
        for I in multi_indices_upto(b.n, k):
            e = C.pullback_prolongation(
                sp.diff(Lg.density, b.jet_symbol(JetVar(alpha, I))),
                allow_unchecked=True)
            for i in range(b.n):
                e -= C.nabla_apply(T.coefficient(alpha, I, i), i)
            for J, i in I.decompositions():
                e -= T.coefficient(alpha, J, i)
            e = canonicalize(e)
            v = is_zero(e, policy)
            ok = ok and v.is_zero
            balance.append((b.jet_name(JetVar(alpha, I)), e, v))

    el_cross = None
    consistent = None
    if cross_check and ok:
        try:
            el_cross = check_hj_solution(el_solved(Lg), C, policy)
            consistent = el_cross.passed
        except JetError:
            el_cross = None
    return GeneralizedHjReport(flat, constraints, balance, el_cross, consistent, ok)
