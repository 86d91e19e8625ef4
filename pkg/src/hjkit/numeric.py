"""Numerical layer: integrate flat-connection sections and evaluate residuals.

A flat connection of order k defines the compatible first-order system
 d(u^a_I)/dx^i = u^a_{Ii}  (|I| < k)  and  = coefficient  (|I| = k).
Integration is dimension-by-dimension classic RK4 along a declared path
order; the max deviation between the path order and its reverse is the
numeric shadow of flatness.  Residuals of candidate solutions against a
solved system use symbolic derivatives for closed forms and centered h^2
differences for sampled sections.
"""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy as sp

from .connection import HolonomicConnection
from .exprs import Expression, _NUMERIC_MODULES, canonicalize, format_expr
from .jet import (Bundle, JetError, JetVar, MultiIndex, SolvedPde,
                  multi_indices_upto, total_derivative_multi)

DEFAULT_INTEGRATION_TOL = 1e-8
DEFAULT_RESIDUAL_TOL = 1e-6


class NumericError(JetError):
    pass


class IntegrationPoleError(NumericError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"pole encountered while integrating near {node}")


class CompatibilityError(NumericError):
    def __init__(self, defect, tolerance):
        self.defect = defect
        super().__init__(
            f"path-reversal defect {defect:.3e} exceeds 100 x tolerance "
            f"{tolerance:.1e}; connection looks non-flat or stiff")


@dataclass(frozen=True)
class AxisSpec:
    lo: float
    hi: float
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise NumericError("grid step must be positive")
        if not self.hi > self.lo:
            raise NumericError("grid range must be non-degenerate")

    @property
    def count(self) -> int:
        return int(round((self.hi - self.lo) / self.h)) + 1

    def values(self) -> np.ndarray:
        return self.lo + self.h * np.arange(self.count)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple[AxisSpec, ...]       # one per base variable, bundle order
    path: tuple[int, ...] = ()       # integration order; default = bundle order

    def __post_init__(self):
        path = self.path or tuple(range(len(self.axes)))
        if sorted(path) != list(range(len(self.axes))):
            raise NumericError("path must be a permutation of the base axes")
        object.__setattr__(self, "path", path)

    def shape(self) -> tuple[int, ...]:
        return tuple(a.count for a in self.axes)

    def corner(self) -> tuple[float, ...]:
        return tuple(a.lo for a in self.axes)

    def node_values(self, idx: tuple[int, ...]) -> tuple[float, ...]:
        return tuple(a.lo + a.h * j for a, j in zip(self.axes, idx))


def state_jet_vars(bundle: Bundle, k: int) -> list[JetVar]:
    return [JetVar(alpha, I) for alpha in range(bundle.m)
            for I in multi_indices_upto(bundle.n, k)]


@dataclass
class SampledSection:
    bundle: Bundle
    order: int
    grid: GridSpec
    jetvars: list[JetVar]
    data: np.ndarray            # shape (*grid.shape(), len(jetvars))
    meta: dict = field(default_factory=dict)

    def values(self, jv: JetVar) -> np.ndarray:
        return self.data[..., self.jetvars.index(jv)]

    def export_csv(self, path):
        """Header: base variables then jet variables in canonical order; one
        node per row, row-major in the integration path order."""
        b, grid = self.bundle, self.grid
        header = list(b.base) + [b.jet_name(jv) for jv in self.jetvars]
        shape = grid.shape()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for flat in _path_major_indices(shape, grid.path):
                xs = grid.node_values(flat)
                w.writerow([f"{x:.12g}" for x in xs]
                           + [f"{v:.12g}" for v in self.data[flat]])


def _path_major_indices(shape, path):
    ranges = [range(shape[i]) for i in path]
    import itertools
    for combo in itertools.product(*ranges):
        idx = [0] * len(shape)
        for axis, j in zip(path, combo):
            idx[axis] = j
        yield tuple(idx)


def _compile_rhs(C: HolonomicConnection, jetvars, params):
    """RHS tables F[i][state index] as python callables f(xs, ys)."""
    b, k = C.bundle, C.order
    state_syms = [b.jet_symbol(jv) for jv in jetvars]
    args = list(b.base_symbols) + state_syms
    index = {jv: p for p, jv in enumerate(jetvars)}
    tables = []
    for i in range(b.n):
        fns = []
        for jv in jetvars:
            up = JetVar(jv.alpha, jv.idx.inc(i))
            if jv.order < k:
                pos = index[up]
                fns.append(lambda xs, ys, pos=pos: ys[pos])
            else:
                e = C.coeffs[up].subs(params, simultaneous=True) if params else C.coeffs[up]
                f = sp.lambdify(args, e, modules=_NUMERIC_MODULES)
                fns.append(lambda xs, ys, f=f: f(*xs, *ys))
        tables.append(fns)
    return tables


def _rk4_line(tables, axis, xs0, y0, h, count):
    """Integrate along one axis; returns array (count, len(y0))."""
    def deriv(xs, ys):
        return [fn(xs, ys) for fn in tables[axis]]

    out = [list(y0)]
    xs = list(xs0)
    y = list(y0)
    for _ in range(count - 1):
        x_mid = list(xs)
        x_end = list(xs)
        x_mid[axis] += h / 2
        x_end[axis] += h
        try:
            k1 = deriv(xs, y)
            k2 = deriv(x_mid, [yi + h / 2 * ki for yi, ki in zip(y, k1)])
            k3 = deriv(x_mid, [yi + h / 2 * ki for yi, ki in zip(y, k2)])
            k4 = deriv(x_end, [yi + h * ki for yi, ki in zip(y, k3)])
        except (ZeroDivisionError, ValueError, OverflowError) as exc:
            raise IntegrationPoleError(tuple(xs)) from exc
        y = [yi + h / 6 * (a + 2 * b_ + 2 * c + d)
             for yi, a, b_, c, d in zip(y, k1, k2, k3, k4)]
        if not all(math.isfinite(v) for v in y):
            raise IntegrationPoleError(tuple(x_end))
        xs = x_end
        out.append(list(y))
    return np.array(out)


def _fill_grid(tables, grid: GridSpec, y0, path) -> np.ndarray:
    shape = grid.shape()
    nvars = len(y0)
    data = np.full(shape + (nvars,), np.nan)
    data[(0,) * len(shape)] = y0
    filled_axes: list[int] = []
    for axis in path:
        spec = grid.axes[axis]
        import itertools
        ranges = [range(shape[a]) if a in filled_axes else range(1)
                  for a in range(len(shape))]
        for idx in itertools.product(*ranges):
            xs0 = grid.node_values(idx)
            line = _rk4_line(tables, axis, xs0, data[idx], spec.h, spec.count)
            sl = list(idx)
            for j in range(spec.count):
                sl[axis] = j
                data[tuple(sl)] = line[j]
        filled_axes.append(axis)
    return data


def integrate_section(C: HolonomicConnection,
                      initial: Mapping[JetVar, float],
                      grid: GridSpec,
                      params: Mapping[sp.Symbol, object] | None = None,
                      tolerance: float = DEFAULT_INTEGRATION_TOL,
                      check_defect: bool = True) -> SampledSection:
    """Fourth-order one-step integration of the compatible system along the
    grid's path order.  The returned section's meta carries the max absolute
    deviation from integrating along the reversed path (flatness witness)."""
    b, k = C.bundle, C.order
    C.require_flat()
    jetvars = state_jet_vars(b, k)
    missing = [b.jet_name(jv) for jv in jetvars if jv not in initial]
    if missing:
        raise NumericError(f"initial jet misses components: {', '.join(missing)}")
    if len(grid.axes) != b.n:
        raise NumericError("grid must declare one axis per base variable")
    params = dict(params or {})
    free = set()
    for e in C.coeffs.values():
        free |= {s.name for s in e.free_symbols if b.classify(s)[0] == "param"}
    unbound = free - {s.name for s in params}
    if unbound:
        raise NumericError(f"unbound parameters: {', '.join(sorted(unbound))}")

    tables = _compile_rhs(C, jetvars, params)
    y0 = [float(initial[jv]) for jv in jetvars]
    data = _fill_grid(tables, grid, y0, grid.path)
    data_rev = _fill_grid(tables, grid, y0, tuple(reversed(grid.path)))
    defect = float(np.max(np.abs(data - data_rev)))
    if check_defect and defect > 100 * tolerance:
        raise CompatibilityError(defect, tolerance)
    meta = {"connection": C.name, "path_defect": defect,
            "flatness_basis": C.flatness}
    return SampledSection(b, k, grid, jetvars, data, meta)


# ---------------------------------------------------------------------------
# residuals


@dataclass
class ResidualReport:
    max_abs: float
    argmax: dict
    per_rule: list  # (rule name, max, argmax dict)
    points: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance

    def to_dict(self):
        return {
            "passed": self.passed,
            "max_abs_residual": self.max_abs,
            "argmax": {k: float(v) for k, v in self.argmax.items()},
            "points": self.points,
            "tolerance": self.tolerance,
            "rules": [{"rule": n, "max_abs": m,
                       "argmax": {k: float(v) for k, v in am.items()}}
                      for n, m, am in self.per_rule],
        }


def _closed_form_jets(bundle: Bundle, solution: Mapping[int, Expression],
                      needed: set[JetVar]) -> dict[JetVar, Expression]:
    out = {}
    for jv in needed:
        if jv.alpha not in solution:
            raise NumericError(
                f"solution gives no component for '{bundle.deps[jv.alpha]}'")
        base = solution[jv.alpha]
        bundle.validate_expression(base, max_order=0, what="closed-form component")
        out[jv] = canonicalize(total_derivative_multi(bundle, base, jv.idx))
    return out


def residual_closed_form(S: SolvedPde, solution: Mapping[int, Expression],
                         points: Sequence[Mapping[str, float]],
                         params: Mapping[sp.Symbol, object] | None = None,
                         tolerance: float = DEFAULT_RESIDUAL_TOL) -> ResidualReport:
    """Residual of a closed-form section: symbolic derivatives, then floats."""
    b = S.bundle
    params = dict(params or {})
    needed: set[JetVar] = set()
    exprs = []
    for jv, rhs in S.rule_items():
        e = b.jet_symbol(jv) - rhs
        needed |= set(b.jet_vars_in(e).values())
        exprs.append((b.jet_name(jv), e))
    jets = _closed_form_jets(b, solution, needed)
    jet_subs = {b.jet_symbol(jv): e for jv, e in jets.items()}
    base_syms = list(b.base_symbols)
    compiled = []
    for name, e in exprs:
        ee = e.subs(jet_subs, simultaneous=True)
        if params:
            ee = ee.subs(params, simultaneous=True)
        leftover = [s.name for s in ee.free_symbols if s.name not in b.base]
        if leftover:
            raise NumericError(f"unbound symbols in residual: {', '.join(sorted(leftover))}")
        compiled.append((name, sp.lambdify(base_syms, ee, modules=_NUMERIC_MODULES)))
    per_rule = []
    gmax, gargmax = -1.0, {}
    for name, f in compiled:
        rmax, rarg = -1.0, {}
        for pt in points:
            xs = [float(pt[nm]) for nm in b.base]
            try:
                v = abs(float(f(*xs)))
            except (ZeroDivisionError, ValueError, OverflowError) as exc:
                raise NumericError(f"residual evaluation failed at {pt}: {exc}") from exc
            if v > rmax:
                rmax, rarg = v, dict(zip(b.base, xs))
        per_rule.append((name, rmax, rarg))
        if rmax > gmax:
            gmax, gargmax = rmax, rarg
    return ResidualReport(gmax, gargmax, per_rule, len(points), tolerance)


def _diff_axis(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered h^2 difference along one axis; shrinks that axis by 2."""
    sl_p = [slice(1, -1)] * arr.ndim
    sl_m = [slice(1, -1)] * arr.ndim
    sl_p[axis] = slice(2, None)
    sl_m[axis] = slice(None, -2)
    sl_c = [slice(1, -1)] * arr.ndim
    out = (arr[tuple(sl_p)] - arr[tuple(sl_m)]) / (2 * h)
    # restore untouched axes (slices above trimmed every axis)
    return out


def _stencil_values(section: SampledSection, jv: JetVar) -> tuple[np.ndarray, int]:
    """Array of jv values on the grid with a margin; margin = number of
    centered differences applied per axis beyond the stored jets."""
    b = section.bundle
    stored = {v: i for i, v in enumerate(section.jetvars)}
    best = None
    for v in section.jetvars:
        if v.alpha == jv.alpha and jv.idx.covers(v.idx):
            if best is None or v.order > best.order:
                best = v
    if best is None:
        raise NumericError(f"section lacks data for {b.jet_name(jv)}")
    arr = section.data[..., stored[best]]
    extra = jv.idx.minus(best.idx)
    margin = extra.order
    for axis in extra.iter_indices():
        h = section.grid.axes[axis].h
        pad = [slice(None)] * arr.ndim
        shifted_p, shifted_m = arr.copy(), arr.copy()
        sl_p = [slice(None)] * arr.ndim
        sl_m = [slice(None)] * arr.ndim
        sl_p[axis] = slice(2, None)
        sl_m[axis] = slice(None, -2)
        ctr = [slice(None)] * arr.ndim
        ctr[axis] = slice(1, -1)
        out = np.full_like(arr, np.nan)
        out[tuple(ctr)] = (arr[tuple(sl_p)] - arr[tuple(sl_m)]) / (2 * h)
        arr = out
    return arr, margin


def residual_sampled(S: SolvedPde, section: SampledSection,
                     params: Mapping[sp.Symbol, object] | None = None,
                     tolerance: float = DEFAULT_RESIDUAL_TOL) -> ResidualReport:
    """Residual on a sampled section: jets beyond the stored order come from
    centered differences, so only interior nodes with enough margin count."""
    b = S.bundle
    params = dict(params or {})
    shape = section.grid.shape()
    per_rule = []
    gmax, gargmax = -1.0, {}
    total_pts = 0
    for jv, rhs in S.rule_items():
        e = b.jet_symbol(jv) - rhs
        needed = sorted(b.jet_vars_in(e).items(), key=lambda kv: kv[0].name)
        arrays, margin = [], 0
        for sym, v in needed:
            a, m = _stencil_values(section, v)
            arrays.append(a)
            margin = max(margin, m)
        if any(margin >= s // 2 + (s % 2) for s in shape) or any(
                2 * margin >= s for s in shape):
            raise NumericError("insufficient grid margin for difference stencils")
        ee = e.subs(params, simultaneous=True) if params else e
        f = sp.lambdify(list(b.base_symbols) + [sym for sym, _ in needed], ee,
                        modules=[_NUMERIC_MODULES[0], "numpy"])
        inner = tuple(slice(margin, s - margin) for s in shape)
        coords = np.meshgrid(*[a.values() for a in section.grid.axes], indexing="ij")
        vals = f(*[c[inner] for c in coords], *[a[inner] for a in arrays])
        vals = np.abs(np.asarray(vals, dtype=float))
        pos = np.unravel_index(np.argmax(vals), vals.shape)
        full_pos = tuple(p + margin for p in pos)
        arg = dict(zip(b.base, section.grid.node_values(full_pos)))
        rmax = float(vals[pos])
        per_rule.append((b.jet_name(jv), rmax, arg))
        total_pts = max(total_pts, int(np.prod(vals.shape)))
        if rmax > gmax:
            gmax, gargmax = rmax, arg
    return ResidualReport(gmax, gargmax, per_rule, total_pts, tolerance)


def compare_with_closed_form(section: SampledSection,
                             solution: Mapping[int, Expression],
                             params: Mapping[sp.Symbol, object] | None = None) -> float:
    """Max absolute deviation of the sampled section from a closed form."""
    b = section.bundle
    params = dict(params or {})
    jets = _closed_form_jets(b, solution, set(section.jetvars))
    coords = np.meshgrid(*[a.values() for a in section.grid.axes], indexing="ij")
    worst = 0.0
    for p, jv in enumerate(section.jetvars):
        e = jets[jv].subs(params, simultaneous=True) if params else jets[jv]
        f = sp.lambdify(list(b.base_symbols), e,
                        modules=[_NUMERIC_MODULES[0], "numpy"])
        ref = np.asarray(f(*coords), dtype=float)
        ref = np.broadcast_to(ref, section.data[..., p].shape)
        worst = max(worst, float(np.max(np.abs(section.data[..., p] - ref))))
    return worst


def sample_points(bundle: Bundle, box: Mapping[str, tuple[float, float]],
                  count: int, seed: int = 0) -> list[dict[str, float]]:
    rng = random.Random(seed)
    pts = []
    for _ in range(count):
        pts.append({name: rng.uniform(*box[name]) for name in bundle.base})
    return pts
