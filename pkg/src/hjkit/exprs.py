"""Symbolic expression layer.

Expressions are plain ``sympy.Expr`` values built from exact rationals,
declared symbols, a fixed set of elementary functions, and unknown-function
symbols applied to their declared argument lists.  This module provides the
declaration-checked parser, rational canonicalization, differentiation,
simultaneous substitution, point evaluation, and the two-tier zero test that
backs every identity check in the toolkit.

The exact tier of the zero test only ever speaks for expressions that are
rational over symbols and unknown-function atoms (formal derivatives of
unknowns included: those are algebraically independent, so treating them as
opaque generators is sound in both directions).  Anything containing an
elementary function goes to seeded numeric sampling.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import sympy as sp
from sympy.core.function import AppliedUndef
from sympy.printing.latex import LatexPrinter
from sympy.printing.str import StrPrinter

Expression = sp.Expr

ELEMENTARY: dict[str, Callable] = {
    "exp": sp.exp,
    "ln": sp.log,
    "sqrt": sp.sqrt,
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "sech": sp.sech,
    "tanh": sp.tanh,
}

_NUMERIC_MODULES = [{"sech": lambda z: 1.0 / math.cosh(z)}, "math"]

# Sampling parallelism for the probabilistic zero test (set by the CLI's
# --threads flag; expressions are immutable so this is safe).
THREADS = 1

EXACT_ONLY = "exact-only"
EXACT_THEN_PROBABILISTIC = "exact-then-probabilistic"

ZERO_EXACT = "zero-exact"
ZERO_PROBABILISTIC = "zero-probabilistic"
NONZERO = "nonzero"
INDETERMINATE = "indeterminate"


class ExprError(Exception):
    pass


class ParseError(ExprError):
    def __init__(self, message, pos=None, line=None, col=None):
        self.pos, self.line, self.col = pos, line, col
        where = ""
        if line is not None:
            where = f" at line {line}:{col}"
        elif pos is not None:
            where = f" at offset {pos}"
        super().__init__(message + where)
        self.message = message


class UndeclaredSymbolError(ParseError):
    def __init__(self, name, pos=None, line=None, col=None):
        super().__init__(f"undeclared symbol '{name}'", pos, line, col)
        self.name = name


class EvalError(ExprError):
    pass


class PoleError(EvalError):
    pass


class DomainError(EvalError):
    pass


class UnboundSymbolError(EvalError):
    pass


# ---------------------------------------------------------------------------
# symbol tables


@dataclass
class SymbolTable:
    """Declared names for parsing.

    ``fallback`` lets a jet bundle fabricate jet-coordinate symbols on
    demand; it may raise to veto a name (e.g. order cap exceeded).
    """

    symbols: dict[str, sp.Symbol] = field(default_factory=dict)
    unknowns: dict[str, tuple] = field(default_factory=dict)
    fallback: Callable[[str], sp.Symbol | None] | None = None

    def declare(self, *names: str) -> list[sp.Symbol]:
        out = []
        for n in names:
            if n in self.symbols or n in self.unknowns or n in ELEMENTARY:
                raise ExprError(f"name '{n}' already declared")
            self.symbols[n] = sp.Symbol(n)
            out.append(self.symbols[n])
        return out

    def declare_unknown(self, name: str, args: Sequence[sp.Symbol]):
        if name in self.symbols or name in self.unknowns or name in ELEMENTARY:
            raise ExprError(f"name '{name}' already declared")
        fn = sp.Function(name)
        self.unknowns[name] = (fn, tuple(args))
        return fn

    def resolve(self, name: str) -> sp.Symbol | None:
        if name in self.symbols:
            return self.symbols[name]
        if self.fallback is not None:
            return self.fallback(name)
        return None

    def resolve_unknown(self, name: str):
        return self.unknowns.get(name)


# ---------------------------------------------------------------------------
# tokenizer (shared with the problem-file parser)

NAME, NUMBER, OP, NEWLINE, END = "name", "number", "op", "newline", "end"
_OPS = set("+-*/^(),=;.{}[]")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c == "\n":
            toks.append(Token(NEWLINE, c, i, line, col))
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot and j + 1 < n and text[j + 1].isdigit())):
                if text[j] == ".":
                    seen_dot = True
                j += 1
            toks.append(Token(NUMBER, text[i:j], i, line, col))
            col += j - i
            i = j
            continue
        if c.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(Token(NAME, text[i:j], i, line, col))
            col += j - i
            i = j
            continue
        if c in _OPS:
            toks.append(Token(OP, c, i, line, col))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character '{c}'", i, line, col)
    toks.append(Token(END, "", n, line, col))
    return toks


class _TokenStream:
    def __init__(self, tokens: list[Token], skip_newlines=True):
        self.tokens = tokens
        self.i = 0
        self.skip_newlines = skip_newlines

    def peek(self) -> Token:
        i = self.i
        while self.skip_newlines and self.tokens[i].kind == NEWLINE:
            i += 1
        return self.tokens[i]

    def next(self) -> Token:
        while self.skip_newlines and self.tokens[self.i].kind == NEWLINE:
            self.i += 1
        t = self.tokens[self.i]
        if t.kind != END:
            self.i += 1
        return t

    def expect_op(self, text: str) -> Token:
        t = self.next()
        if t.kind != OP or t.text != text:
            raise ParseError(f"expected '{text}', found '{t.text or 'end of input'}'", t.pos, t.line, t.col)
        return t


# ---------------------------------------------------------------------------
# expression parser


def parse_expr(text: str, table: SymbolTable) -> Expression:
    """Parse ``text`` against declared symbols and return the canonical form."""
    ts = _TokenStream(tokenize(text))
    e = _parse_sum(ts, table)
    t = ts.peek()
    if t.kind != END:
        raise ParseError(f"unexpected '{t.text}'", t.pos, t.line, t.col)
    return canonicalize(e)


def parse_expr_tokens(ts: _TokenStream, table: SymbolTable) -> Expression:
    """Parse one expression from an open token stream (problem files)."""
    return canonicalize(_parse_sum(ts, table))


def _parse_sum(ts, table):
    e = _parse_term(ts, table)
    while True:
        t = ts.peek()
        if t.kind == OP and t.text in "+-":
            ts.next()
            rhs = _parse_term(ts, table)
            e = e + rhs if t.text == "+" else e - rhs
        else:
            return e


def _parse_term(ts, table):
    e = _parse_unary(ts, table)
    while True:
        t = ts.peek()
        if t.kind == OP and t.text in "*/":
            ts.next()
            rhs = _parse_unary(ts, table)
            e = e * rhs if t.text == "*" else e / rhs
        else:
            return e


def _parse_unary(ts, table):
    t = ts.peek()
    if t.kind == OP and t.text == "-":
        ts.next()
        return -_parse_unary(ts, table)
    return _parse_power(ts, table)


def _parse_power(ts, table):
    base = _parse_atom(ts, table)
    t = ts.peek()
    if t.kind == OP and t.text == "^":
        ts.next()
        exp = _parse_exponent(ts, table)
        return base ** exp
    return base


def _parse_exponent(ts, table):
    # integer powers only; parentheses required around negative exponents
    t = ts.next()
    if t.kind == NUMBER and "." not in t.text:
        return sp.Integer(int(t.text))
    if t.kind == OP and t.text == "(":
        sign = 1
        t2 = ts.next()
        if t2.kind == OP and t2.text == "-":
            sign = -1
            t2 = ts.next()
        if t2.kind != NUMBER or "." in t2.text:
            raise ParseError("expected integer exponent", t2.pos, t2.line, t2.col)
        ts.expect_op(")")
        return sp.Integer(sign * int(t2.text))
    raise ParseError("expected integer exponent", t.pos, t.line, t.col)


def _parse_atom(ts, table):
    t = ts.next()
    if t.kind == NUMBER:
        if "." in t.text:
            return sp.Rational(t.text)
        return sp.Integer(int(t.text))
    if t.kind == OP and t.text == "(":
        e = _parse_sum(ts, table)
        ts.expect_op(")")
        return e
    if t.kind == NAME:
        nxt = ts.peek()
        if nxt.kind == OP and nxt.text == "(":
            ts.next()
            args = [_parse_sum(ts, table)]
            while ts.peek().kind == OP and ts.peek().text == ",":
                ts.next()
                args.append(_parse_sum(ts, table))
            ts.expect_op(")")
            if t.text in ELEMENTARY:
                if len(args) != 1:
                    raise ParseError(f"{t.text} takes one argument", t.pos, t.line, t.col)
                return ELEMENTARY[t.text](args[0])
            unk = table.resolve_unknown(t.text)
            if unk is not None:
                fn, decl_args = unk
                if tuple(args) != decl_args:
                    raise ParseError(
                        f"unknown function '{t.text}' must be applied to its declared arguments "
                        f"({', '.join(a.name for a in decl_args)})", t.pos, t.line, t.col)
                return fn(*decl_args)
            raise UndeclaredSymbolError(t.text, t.pos, t.line, t.col)
        unk = table.resolve_unknown(t.text)
        if unk is not None:
            fn, decl_args = unk  # bare name is sugar for the full application
            return fn(*decl_args)
        try:
            sym = table.resolve(t.text)
        except ExprError as exc:
            raise ParseError(str(exc), t.pos, t.line, t.col) from exc
        if sym is None:
            raise UndeclaredSymbolError(t.text, t.pos, t.line, t.col)
        return sym
    raise ParseError(
        f"expected expression, found '{t.text or 'end of input'}'", t.pos, t.line, t.col)


# ---------------------------------------------------------------------------
# core operations


def canonicalize(e: Expression) -> Expression:
    """Reduced ratio of expanded polynomials over Q; non-rational subtrees
    are treated as opaque generators."""
    return sp.cancel(sp.together(e))


def equal(a: Expression, b: Expression) -> bool:
    """Canonical equality (exact for rational-over-atoms expressions)."""
    return canonicalize(a - b) == 0


def differentiate(e: Expression, s: sp.Symbol) -> Expression:
    """Exact partial derivative; unknown functions chain-rule into formal
    derivative nodes over their declared arguments."""
    if not isinstance(s, sp.Symbol):
        raise ExprError(f"cannot differentiate with respect to {s!r}")
    return canonicalize(sp.diff(e, s))


def substitute(e: Expression, bindings: Mapping[sp.Symbol, Expression]) -> Expression:
    """Simultaneous substitution (bindings do not chain), then canonicalize."""
    if not bindings:
        return canonicalize(e)
    return canonicalize(e.subs(dict(bindings), simultaneous=True))


def is_rational_expr(e: Expression) -> bool:
    """True when ``e`` is rational over symbols and unknown-function atoms."""
    for node in sp.preorder_traversal(e):
        if isinstance(node, (sp.Derivative, AppliedUndef)):
            continue
        if isinstance(node, sp.Function):
            return False
        if isinstance(node, sp.Pow) and not node.exp.is_Integer:
            return False
    return True


def opaque_atoms(e: Expression) -> list[sp.Basic]:
    """Unknown-function applications and their formal derivatives, outermost
    first (derivatives precede the bare applications they contain)."""
    ders = sorted(e.atoms(sp.Derivative), key=sp.default_sort_key)
    apps = sorted(e.atoms(AppliedUndef), key=sp.default_sort_key)
    return list(ders) + list(apps)


def opaque_label(atom: sp.Basic) -> str:
    """Compact display name: B(t,x,u) -> 'B', d/dx d/du B -> 'B_xu'."""
    if isinstance(atom, AppliedUndef):
        return atom.func.__name__
    if isinstance(atom, sp.Derivative):
        base = atom.expr
        argpos = {a: i for i, a in enumerate(base.args)}
        groups = sorted(atom.variable_count, key=lambda vc: argpos.get(vc[0], 99))
        letters = "".join(v.name * int(c) for v, c in groups)
        return f"{base.func.__name__}_{letters}"
    return str(atom)


@dataclass(frozen=True)
class ZeroTestPolicy:
    mode: str = EXACT_THEN_PROBABILISTIC
    samples: int = 16
    box: tuple[float, float] = (0.5, 1.5)
    tolerance: float = 1e-9
    seed: int = 0
    retries: int = 8

    def __post_init__(self):
        if self.mode not in (EXACT_ONLY, EXACT_THEN_PROBABILISTIC):
            raise ExprError(f"unknown zero-test mode '{self.mode}'")


@dataclass(frozen=True)
class Verdict:
    kind: str
    samples: int = 0
    max_magnitude: float = 0.0
    witness: Mapping[str, object] | None = None
    witness_value: object | None = None
    reason: str = ""

    @property
    def is_zero(self) -> bool:
        return self.kind in (ZERO_EXACT, ZERO_PROBABILISTIC)

    def to_dict(self) -> dict:
        d = {"verdict": self.kind}
        if self.kind == ZERO_PROBABILISTIC:
            d["samples"] = self.samples
            d["max_magnitude"] = self.max_magnitude
        if self.witness is not None:
            d["witness"] = {k: str(v) for k, v in self.witness.items()}
            d["witness_value"] = str(self.witness_value)
        if self.reason:
            d["reason"] = self.reason
        return d


def _opaque_dummy_map(e):
    return {a: sp.Dummy(opaque_label(a)) for a in opaque_atoms(e)}


def _sample_vars(c):
    """Replace opaque atoms by dummies; return (expr, [(label, var)])."""
    dmap = _opaque_dummy_map(c)
    ders = {a: d for a, d in dmap.items() if isinstance(a, sp.Derivative)}
    apps = {a: d for a, d in dmap.items() if isinstance(a, AppliedUndef)}
    c2 = c.xreplace(ders).xreplace(apps)
    labels = []
    for a, d in dmap.items():
        if d in c2.free_symbols:
            labels.append((opaque_label(a), d))
    for s in sorted(c2.free_symbols, key=lambda s: s.name):
        if not any(v is s for _, v in labels):
            labels.append((s.name, s))
    return c2, labels


def _rational_witness(c, policy):
    c2, labels = _sample_vars(c)
    rng = random.Random(policy.seed)
    lo, hi = policy.box
    lo_n, hi_n = math.ceil(lo * 16), math.floor(hi * 16)
    for _ in range(max(1, policy.samples) * max(1, policy.retries)):
        point = {v: sp.Rational(rng.randint(lo_n, hi_n), 16) for _, v in labels}
        val = c2.subs(point)
        if val.has(sp.zoo, sp.nan, sp.oo, -sp.oo):
            continue
        if val != 0:
            witness = {lbl: point[v] for lbl, v in labels}
            return witness, val
    return None, None


def is_zero(e: Expression, policy: ZeroTestPolicy | None = None) -> Verdict:
    """Two-tier zero test.

    Rational expressions are decided exactly from the canonical form
    (nonzero comes with an exact rational witness).  Expressions containing
    elementary functions are sampled numerically inside ``policy.box``.
    """
    policy = policy or ZeroTestPolicy()
    if is_rational_expr(e):
        c = canonicalize(e)
        if c == 0:
            return Verdict(ZERO_EXACT)
        witness, val = _rational_witness(c, policy)
        if witness is None:
            return Verdict(INDETERMINATE, reason="could not find a nonzero witness point")
        return Verdict(NONZERO, witness=witness, witness_value=val)
    if policy.mode == EXACT_ONLY:
        return Verdict(INDETERMINATE,
                       reason="contains elementary functions; exact tier cannot decide")
    return _probabilistic(canonicalize(e), policy)


def _probabilistic(c, policy):
    if c == 0:
        c = sp.S.Zero
    c2, labels = _sample_vars(c)
    variables = [v for _, v in labels]
    terms = sp.Add.make_args(c2)
    scale_expr = sp.Add(*[sp.Abs(t) for t in terms]) if terms else sp.S.Zero
    f = sp.lambdify(variables, [c2, scale_expr], modules=_NUMERIC_MODULES)
    rng = random.Random(policy.seed)
    lo, hi = policy.box

    def attempt(point):
        try:
            val, scale = f(*point)
            val, scale = float(val), float(scale)
        except (ZeroDivisionError, ValueError, OverflowError, TypeError):
            return None
        if not (math.isfinite(val) and math.isfinite(scale)):
            return None
        return val, scale

    batch = [[rng.uniform(lo, hi) for _ in variables] for _ in range(policy.samples)]
    if THREADS > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=THREADS) as pool:
            results = list(pool.map(attempt, batch))
    else:
        results = [attempt(p) for p in batch]

    max_mag = 0.0
    for point, res in zip(batch, results):
        for _retry in range(policy.retries):
            if res is not None:
                break
            point = [rng.uniform(lo, hi) for _ in variables]
            res = attempt(point)
        if res is None:
            return Verdict(INDETERMINATE, reason="sampling hit poles at every retry")
        val, scale = res
        max_mag = max(max_mag, abs(val))
        if abs(val) > policy.tolerance * max(1.0, scale):
            witness = {lbl: x for (lbl, _), x in zip(labels, point)}
            return Verdict(NONZERO, samples=policy.samples, max_magnitude=max_mag,
                           witness=witness, witness_value=val)
    return Verdict(ZERO_PROBABILISTIC, samples=policy.samples, max_magnitude=max_mag)


def eval_point(e: Expression, point: Mapping, ) -> float:
    """Evaluate at a concrete real point; poles and domain violations raise."""
    if e.atoms(AppliedUndef) or e.atoms(sp.Derivative):
        raise EvalError("expression contains unknown-function nodes")
    named = {}
    for k, v in point.items():
        named[k.name if isinstance(k, sp.Symbol) else str(k)] = v
    free = sorted(e.free_symbols, key=lambda s: s.name)
    missing = [s.name for s in free if s.name not in named]
    if missing:
        raise UnboundSymbolError(f"unbound symbols: {', '.join(missing)}")
    f = sp.lambdify(free, e, modules=_NUMERIC_MODULES)
    try:
        val = f(*[float(named[s.name]) for s in free])
    except ZeroDivisionError as exc:
        raise PoleError(f"pole while evaluating: {exc}") from exc
    except (ValueError, OverflowError) as exc:
        raise DomainError(f"domain violation while evaluating: {exc}") from exc
    val = float(val)
    if not math.isfinite(val):
        raise PoleError("evaluation produced a non-finite value")
    return val


# ---------------------------------------------------------------------------
# printing


class _CompactStr(StrPrinter):
    def _print_Derivative(self, expr):
        return opaque_label(expr)

    def _print_Function(self, expr):
        if isinstance(expr, AppliedUndef):
            return expr.func.__name__
        return super()._print_Function(expr)


class _CompactLatex(LatexPrinter):
    def _print_Derivative(self, expr):
        if isinstance(expr.expr, AppliedUndef):
            name, _, letters = opaque_label(expr).partition("_")
            return f"{name}_{{{letters}}}"
        return super()._print_Derivative(expr)

    def _print_Function(self, expr, exp=None):
        if isinstance(expr, AppliedUndef):
            out = expr.func.__name__
            return f"{out}^{{{exp}}}" if exp is not None else out
        return super()._print_Function(expr, exp)


def format_expr(e: Expression) -> str:
    """Deterministic compact rendering used in reports (DSL-flavoured '^')."""
    return _CompactStr().doprint(e).replace("**", "^")


def latex_expr(e: Expression) -> str:
    return _CompactLatex().doprint(e)
