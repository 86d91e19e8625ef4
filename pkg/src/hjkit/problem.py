"""Problem-file format (.hjk): bundles, equations, Lagrangians, connections,
momentum families, Lie fields, closed-form solutions, parameter bindings.

Grammar sketch::

    file  := block+
    block := kind NAME "{" entry* "}"
    kind  := bundle | equation | lagrangian | connection | momenta
           | lie_field | solution | params
    entry := "unknown" NAME "(" names ")"         -- unknown-function decl
           | "base" / "dependent" / "param" "=" names     (bundle only)
           | "order" "=" INT
           | key "=" expression
    key   := NAME | JETNAME | JETNAME "." NAME    -- momenta slots use "."

Entries end at ';' or end of line; '#' comments.  Jet coordinates are
written u_I with I a string of base-variable letters (u_xx, u_xt);
multiplication is explicit, '^' takes integer powers, and unknown functions
must be declared before use.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import sympy as sp

from . import exprs
from .connection import HolonomicConnection
from .exprs import (END, NAME, NEWLINE, NUMBER, OP, ParseError, SymbolTable,
                    Token, canonicalize, format_expr, tokenize)
from .jet import Bundle, JetError, JetVar, LieField, MultiIndex, SolvedPde
from .variational import Lagrangian, MomentumSection

KINDS = ("bundle", "equation", "lagrangian", "connection", "momenta",
         "lie_field", "solution", "params")


@dataclass
class ProblemFile:
    bundle: Bundle
    bundle_name: str
    equations: dict[str, SolvedPde] = field(default_factory=dict)
    lagrangians: dict[str, Lagrangian] = field(default_factory=dict)
    connections: dict[str, HolonomicConnection] = field(default_factory=dict)
    momenta: dict[str, MomentumSection] = field(default_factory=dict)
    lie_fields: dict[str, LieField] = field(default_factory=dict)
    solutions: dict[str, dict[int, sp.Expr]] = field(default_factory=dict)
    params: dict[sp.Symbol, sp.Rational] = field(default_factory=dict)
    unknowns: dict[str, tuple] = field(default_factory=dict)
    block_order: list[tuple[str, str]] = field(default_factory=list)

    def single(self, kind: str, name: str | None):
        store = {
            "equation": self.equations, "lagrangian": self.lagrangians,
            "connection": self.connections, "momenta": self.momenta,
            "lie_field": self.lie_fields, "solution": self.solutions,
        }[kind]
        if name is not None:
            if name not in store:
                raise JetError(f"no {kind} named '{name}' in the problem file")
            return store[name]
        if len(store) == 1:
            return next(iter(store.values()))
        if not store:
            raise JetError(f"the problem file declares no {kind}")
        raise JetError(
            f"several {kind}s declared ({', '.join(sorted(store))}); pick one")

    def merged_params(self, overrides: Mapping[str, object] | None = None):
        out = dict(self.params)
        for name, val in (overrides or {}).items():
            sym = sp.Symbol(name)
            if name not in self.bundle.params:
                raise JetError(f"'{name}' is not a declared parameter")
            out[sym] = sp.Rational(str(val))
        return out


class _Reader:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self, skip_nl=True) -> Token:
        i = self.i
        while skip_nl and self.tokens[i].kind == NEWLINE:
            i += 1
        return self.tokens[i]

    def next(self, skip_nl=True) -> Token:
        while skip_nl and self.tokens[self.i].kind == NEWLINE:
            self.i += 1
        t = self.tokens[self.i]
        if t.kind != END:
            self.i += 1
        return t

    def expect(self, kind, text=None) -> Token:
        t = self.next()
        if t.kind != kind or (text is not None and t.text != text):
            want = text or kind
            raise ParseError(f"expected '{want}', found '{t.text or 'end of input'}'",
                             t.pos, t.line, t.col)
        return t

    def expression_tokens(self) -> list[Token]:
        """Tokens up to ';', end of line (outside parens), or '}'."""
        out = []
        depth = 0
        while True:
            t = self.tokens[self.i]
            if t.kind == END:
                break
            if t.kind == NEWLINE:
                if depth == 0:
                    break
                self.i += 1
                continue
            if t.kind == OP and t.text == "(":
                depth += 1
            if t.kind == OP and t.text == ")":
                depth -= 1
            if t.kind == OP and t.text in ";}" and depth == 0:
                break
            out.append(t)
            self.i += 1
        return out


def _parse_expression(tokens: list[Token], table: SymbolTable, ctx: str) -> sp.Expr:
    if not tokens:
        raise ParseError(f"missing expression for {ctx}")
    stream = exprs._TokenStream(tokens + [Token(END, "", tokens[-1].pos + len(tokens[-1].text),
                                                tokens[-1].line, tokens[-1].col)])
    e = exprs.parse_expr_tokens(stream, table)
    t = stream.peek()
    if t.kind != END:
        raise ParseError(f"unexpected '{t.text}' in {ctx}", t.pos, t.line, t.col)
    return e


def _names_list(rd: _Reader) -> list[str]:
    names = [rd.expect(NAME).text]
    while rd.peek(skip_nl=False).kind == OP and rd.peek(skip_nl=False).text == ",":
        rd.next()
        names.append(rd.expect(NAME).text)
    return names


def _end_entry(rd: _Reader):
    t = rd.peek(skip_nl=False)
    if t.kind == OP and t.text == ";":
        rd.next(skip_nl=False)


@dataclass
class _RawEntry:
    key: str
    sub: str | None   # momenta base-variable part after '.'
    tokens: list[Token]
    token: Token


def _read_block_entries(rd: _Reader, table, kind, unknowns_out):
    """Common entry loop; returns (entries, order, names_by_role)."""
    entries: list[_RawEntry] = []
    order = None
    roles: dict[str, list[str]] = {}
    rd.expect(OP, "{")
    while True:
        t = rd.peek()
        if t.kind == OP and t.text == "}":
            rd.next()
            return entries, order, roles
        if t.kind == END:
            raise ParseError("unexpected end of file inside a block", t.pos, t.line, t.col)
        t = rd.expect(NAME)
        if t.text == "unknown":
            fname = rd.expect(NAME)
            rd.expect(OP, "(")
            args = _names_list(rd)
            rd.expect(OP, ")")
            arg_syms = []
            for a in args:
                s = table.resolve(a)
                if s is None:
                    raise ParseError(f"undeclared symbol '{a}' in unknown-function "
                                     f"declaration", t.pos, t.line, t.col)
                arg_syms.append(s)
            try:
                fn = table.declare_unknown(fname.text, arg_syms)
            except exprs.ExprError as exc:
                raise ParseError(str(exc), fname.pos, fname.line, fname.col) from exc
            unknowns_out[fname.text] = (fn, tuple(arg_syms))
            _end_entry(rd)
            continue
        if kind == "bundle" and t.text in ("base", "dependent", "param"):
            rd.expect(OP, "=")
            roles[t.text] = _names_list(rd)
            _end_entry(rd)
            continue
        if t.text == "order":
            rd.expect(OP, "=")
            num = rd.expect(NUMBER)
            order = int(num.text)
            _end_entry(rd)
            continue
        sub = None
        if rd.peek(skip_nl=False).kind == OP and rd.peek(skip_nl=False).text == ".":
            rd.next()
            sub = rd.expect(NAME).text
        rd.expect(OP, "=")
        toks = rd.expression_tokens()
        entries.append(_RawEntry(t.text, sub, toks, t))
        _end_entry(rd)


def parse_problem(text: str, order_cap: int | None = None) -> ProblemFile:
    rd = _Reader(tokenize(text))
    pf: ProblemFile | None = None
    table: SymbolTable | None = None
    seen: dict[tuple[str, str], Token] = {}
    while rd.peek().kind != END:
        kw = rd.expect(NAME)
        if kw.text not in KINDS:
            raise ParseError(f"unknown block kind '{kw.text}'", kw.pos, kw.line, kw.col)
        name_tok = rd.expect(NAME)
        name = name_tok.text
        if (kw.text, name) in seen:
            first = seen[(kw.text, name)]
            raise ParseError(
                f"duplicate {kw.text} block '{name}' (first declared at line "
                f"{first.line}:{first.col})", name_tok.pos, name_tok.line, name_tok.col)
        seen[(kw.text, name)] = name_tok
        if kw.text == "bundle":
            if pf is not None:
                raise ParseError("only one bundle block is allowed",
                                 kw.pos, kw.line, kw.col)
            entries, _order, roles = _read_block_entries(rd, SymbolTable(), "bundle", {})
            if entries:
                e = entries[0]
                raise ParseError(f"unexpected entry '{e.key}' in bundle block",
                                 e.token.pos, e.token.line, e.token.col)
            try:
                kw_cap = {} if order_cap is None else {"order_cap": order_cap}
                bundle = Bundle(tuple(roles.get("base", ())),
                                tuple(roles.get("dependent", ())),
                                tuple(roles.get("param", ())), **kw_cap)
            except JetError as exc:
                raise ParseError(str(exc), kw.pos, kw.line, kw.col) from exc
            pf = ProblemFile(bundle, name)
            table = bundle.symbol_table()
            pf.block_order.append(("bundle", name))
            continue
        if pf is None:
            raise ParseError("the bundle block must come first", kw.pos, kw.line, kw.col)
        entries, order, _roles = _read_block_entries(rd, table, kw.text, pf.unknowns)
        try:
            _install_block(pf, table, kw.text, name, entries, order)
        except (JetError, exprs.ExprError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"in {kw.text} '{name}': {exc}",
                             kw.pos, kw.line, kw.col) from exc
        pf.block_order.append((kw.text, name))
    if pf is None:
        raise ParseError("empty problem file")
    return pf


def _install_block(pf: ProblemFile, table, kind, name, entries, order):
    b = pf.bundle
    if kind == "equation":
        rules = {}
        for e in entries:
            jv = b.parse_jet_name(e.key)
            if jv is None:
                raise ParseError(f"'{e.key}' is not a jet coordinate",
                                 e.token.pos, e.token.line, e.token.col)
            rules[jv] = _parse_expression(e.tokens, table, f"rule {e.key}")
        pf.equations[name] = SolvedPde(b, rules)
    elif kind == "lagrangian":
        if len(entries) != 1 or entries[0].key != "L":
            raise JetError("a lagrangian block holds exactly one entry 'L = ...'")
        L = _parse_expression(entries[0].tokens, table, "Lagrangian density")
        pf.lagrangians[name] = Lagrangian(b, L, order or 0)
    elif kind == "connection":
        coeffs = {}
        for e in entries:
            jv = b.parse_jet_name(e.key)
            if jv is None:
                raise ParseError(f"'{e.key}' is not a jet coordinate",
                                 e.token.pos, e.token.line, e.token.col)
            coeffs[jv] = _parse_expression(e.tokens, table, f"coefficient {e.key}")
        if not coeffs:
            raise JetError("a connection block needs coefficient entries")
        slot_orders = {jv.order for jv in coeffs}
        if len(slot_orders) != 1:
            raise JetError("connection coefficient slots must share one order")
        k = slot_orders.pop() - 1
        if order is not None and order != k:
            raise JetError(f"declared order {order} but slots imply order {k}")
        pf.connections[name] = HolonomicConnection(b, k, coeffs, name=name)
    elif kind == "momenta":
        coeffs = {}
        kmax = 0
        for e in entries:
            if e.sub is None:
                raise ParseError(f"momenta entries look like 'u.t = ...' "
                                 f"(got '{e.key}')", e.token.pos, e.token.line, e.token.col)
            jv = b.parse_jet_name(e.key)
            if jv is None or e.sub not in b.base:
                raise ParseError(f"bad momenta slot '{e.key}.{e.sub}'",
                                 e.token.pos, e.token.line, e.token.col)
            i = b.base.index(e.sub)
            coeffs[(jv.alpha, jv.idx, i)] = _parse_expression(
                e.tokens, table, f"momentum {e.key}.{e.sub}")
            kmax = max(kmax, jv.order)
        k = order if order is not None else kmax
        pf.momenta[name] = MomentumSection(b, k, coeffs)
    elif kind == "lie_field":
        X = [sp.S.Zero] * b.n
        Y = [sp.S.Zero] * b.m
        for e in entries:
            val = _parse_expression(e.tokens, table, f"component {e.key}")
            if e.key in b.base:
                X[b.base.index(e.key)] = val
            elif e.key in b.deps:
                Y[b.deps.index(e.key)] = val
            else:
                raise ParseError(f"'{e.key}' is neither a base nor a dependent "
                                 f"variable", e.token.pos, e.token.line, e.token.col)
        pf.lie_fields[name] = LieField(b, tuple(X), tuple(Y))
    elif kind == "solution":
        sol = {}
        for e in entries:
            if e.key not in b.deps:
                raise ParseError(f"'{e.key}' is not a dependent variable",
                                 e.token.pos, e.token.line, e.token.col)
            val = _parse_expression(e.tokens, table, f"solution component {e.key}")
            b.validate_expression(val, max_order=0, what=f"solution component {e.key}")
            sol[b.deps.index(e.key)] = val
        pf.solutions[name] = sol
    elif kind == "params":
        for e in entries:
            if e.key not in b.params:
                raise ParseError(f"'{e.key}' is not a declared parameter",
                                 e.token.pos, e.token.line, e.token.col)
            val = _parse_expression(e.tokens, table, f"parameter {e.key}")
            val = canonicalize(val)
            if val.free_symbols or not val.is_Rational:
                raise ParseError(f"parameter '{e.key}' must bind to an exact "
                                 f"rational constant", e.token.pos, e.token.line, e.token.col)
            sym = sp.Symbol(e.key)
            if sym in pf.params:
                raise ParseError(f"parameter '{e.key}' bound twice",
                                 e.token.pos, e.token.line, e.token.col)
            pf.params[sym] = val


# ---------------------------------------------------------------------------
# rendering (round-trip support)


def render_problem(pf: ProblemFile) -> str:
    b = pf.bundle
    out = [f"bundle {pf.bundle_name} {{"]
    out.append(f"  base = {', '.join(b.base)}")
    out.append(f"  dependent = {', '.join(b.deps)}")
    if b.params:
        out.append(f"  param = {', '.join(b.params)}")
    out.append("}")
    unknowns_rendered = set()
    params_rendered = False

    def render_unknowns(exprs_list):
        lines = []
        for e in exprs_list:
            for name, (fn, args) in pf.unknowns.items():
                if name not in unknowns_rendered and e.has(fn(*args)):
                    lines.append(f"  unknown {name}({', '.join(a.name for a in args)})")
                    unknowns_rendered.add(name)
        return lines

    for kind, name in pf.block_order:
        if kind == "bundle":
            continue
        out.append(f"{kind} {name} {{")
        if kind == "equation":
            S = pf.equations[name]
            for lhs, rhs in S.describe():
                out.append(f"  {lhs} = {rhs}")
        elif kind == "lagrangian":
            out.append(f"  L = {format_expr(pf.lagrangians[name].density)}")
        elif kind == "connection":
            C = pf.connections[name]
            out.extend(render_unknowns(C.coeffs.values()))
            for lhs, rhs in C.describe():
                out.append(f"  {lhs} = {rhs}")
        elif kind == "momenta":
            T = pf.momenta[name]
            out.append(f"  order = {T.order}")
            for lhs, rhs in T.describe():
                out.append(f"  {lhs} = {rhs}")
        elif kind == "lie_field":
            f = pf.lie_fields[name]
            for i, e in enumerate(f.X):
                if e != 0:
                    out.append(f"  {b.base[i]} = {format_expr(e)}")
            for a, e in enumerate(f.Y):
                if e != 0:
                    out.append(f"  {b.deps[a]} = {format_expr(e)}")
        elif kind == "solution":
            for alpha, e in sorted(pf.solutions[name].items()):
                out.append(f"  {b.deps[alpha]} = {format_expr(e)}")
        elif kind == "params":
            if params_rendered:
                out.pop()
                continue
            params_rendered = True
            for sym, val in sorted(pf.params.items(), key=lambda kv: kv[0].name):
                out.append(f"  {sym.name} = {val}")
        out.append("}")
    return "\n".join(out) + "\n"
