"""Compile scenario-file expression strings into vectorised numpy callables.

Grammar: real arithmetic (``+ - * / **`` and parentheses), numeric literals,
``pi``, named parameters, and the functions ``exp ln cosh tanh sin cos sqrt
abs step``.  ``step`` is the Heaviside function with ``step(0) = 1/2``; with
that convention a continuous piecewise expression evaluates to the average of
its one-sided limits at a breakpoint, which is the exact value whenever the
expression is continuous there.

Derivatives are taken symbolically; Dirac terms produced by differentiating
``step`` are dropped (one-sided derivative convention).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy as sp

FUNCTIONS = ("exp", "ln", "cosh", "tanh", "sin", "cos", "sqrt", "abs", "step")
_TOKEN = re.compile(r"^[0-9A-Za-z_+\-*/().,\s]*$")
_NAME = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


class ExpressionError(ValueError):
    pass


def _heaviside(a, h0=0.5):
    return np.heaviside(a, h0)


_NUMPY_MODULE = [{"Heaviside": _heaviside}, "numpy"]


def variable_names(prefix: str, dim: int) -> list[str]:
    if dim == 1:
        return [prefix]
    return [f"{prefix}{i + 1}" for i in range(dim)]


def parse(text: str, variables: Sequence[str], params: Mapping[str, float] | None = None) -> sp.Expr:
    """Parse ``text`` into a sympy expression over real ``variables``."""
    params = dict(params or {})
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("empty expression")
    if not _TOKEN.match(text):
        raise ExpressionError(f"illegal character in expression {text!r}")
    allowed = set(FUNCTIONS) | set(variables) | set(params) | {"pi"}
    for name in _NAME.findall(text):
        if name not in allowed:
            raise ExpressionError(f"unknown name {name!r} in expression {text!r}")
    syms = {v: sp.Symbol(v, real=True) for v in variables}
    local = {
        "exp": sp.exp,
        "ln": sp.log,
        "cosh": sp.cosh,
        "tanh": sp.tanh,
        "sin": sp.sin,
        "cos": sp.cos,
        "sqrt": sp.sqrt,
        "abs": sp.Abs,
        "step": lambda a: sp.Heaviside(a, sp.Rational(1, 2)),
        "pi": sp.pi,
    }
    local.update(syms)
    local.update({k: sp.Float(v) if not float(v).is_integer() else sp.Integer(int(v)) for k, v in params.items()})
    try:
        expr = sp.parse_expr(text, local_dict=local, global_dict={"__builtins__": {}, "Integer": sp.Integer, "Float": sp.Float, "Rational": sp.Rational, "Symbol": sp.Symbol})
    except Exception as exc:  # sympy raises a zoo of exception types
        raise ExpressionError(f"cannot parse {text!r}: {exc}") from exc
    if not isinstance(expr, sp.Expr):
        raise ExpressionError(f"{text!r} is not a scalar expression")
    return expr


def _drop_dirac(expr: sp.Expr) -> sp.Expr:
    return expr.replace(lambda e: isinstance(e, sp.DiracDelta), lambda e: sp.Integer(0))


def _vectorize(expr: sp.Expr, symbols: Sequence[sp.Symbol]) -> Callable:
    fn = sp.lambdify(list(symbols), expr, modules=_NUMPY_MODULE)

    def call(*arrays):
        with np.errstate(all="ignore"):
            out = fn(*arrays)
        shape = np.broadcast(*arrays).shape if arrays else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    return call


@dataclass(frozen=True)
class CompiledScalar:
    """A scalar field of one vector argument with gradient and Hessian.

    Calling convention: ``value(x)`` with ``x`` of shape ``(..., d)`` returns
    ``(...)``; ``grad`` returns ``(..., d)``; ``hess`` returns ``(..., d, d)``.
    """

    text: str
    dim: int
    expr: sp.Expr = field(repr=False)
    kinks: tuple[float, ...] = ()
    _value: Callable = field(repr=False, default=None)
    _grad: tuple = field(repr=False, default=())
    _hess: tuple = field(repr=False, default=())

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.array(self._value(*np.moveaxis(x, -1, 0)))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        cols = np.moveaxis(x, -1, 0)
        return np.stack([np.asarray(g(*cols)) for g in self._grad], axis=-1)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        cols = np.moveaxis(x, -1, 0)
        rows = [np.stack([np.asarray(h(*cols)) for h in row], axis=-1) for row in self._hess]
        return np.stack(rows, axis=-2)


def _kinks_1d(expr: sp.Expr, var: sp.Symbol) -> tuple[float, ...]:
    pts: set[float] = set()
    for node in expr.atoms(sp.Heaviside, sp.Abs):
        arg = node.args[0]
        try:
            poly = sp.Poly(arg, var)
        except sp.PolynomialError:
            continue
        for r in poly.real_roots():
            pts.add(float(r))
    return tuple(sorted(pts))


def compile_scalar(text: str, dim: int, prefix: str = "x", params: Mapping[str, float] | None = None) -> CompiledScalar:
    names = variable_names(prefix, dim)
    expr = parse(text, names, params)
    syms = [sp.Symbol(n, real=True) for n in names]
    grads = [_drop_dirac(sp.diff(expr, s)) for s in syms]
    hess = [[_drop_dirac(sp.diff(g, s)) for s in syms] for g in grads]
    kinks = _kinks_1d(expr, syms[0]) if dim == 1 else ()
    return CompiledScalar(
        text=text,
        dim=dim,
        expr=expr,
        kinks=kinks,
        _value=_vectorize(expr, syms),
        _grad=tuple(_vectorize(g, syms) for g in grads),
        _hess=tuple(tuple(_vectorize(h, syms) for h in row) for row in hess),
    )


@dataclass(frozen=True)
class CompiledSymbol:
    """A phase-space expression H(x, xi) with all first and second derivatives."""

    text: str
    dim: int
    _h: Callable = field(repr=False, default=None)
    _gx: tuple = field(repr=False, default=())
    _gxi: tuple = field(repr=False, default=())
    _hxx: tuple = field(repr=False, default=())
    _hmix: tuple = field(repr=False, default=())
    _hxixi: tuple = field(repr=False, default=())

    def _cols(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        x, xi = np.broadcast_arrays(x, xi)
        return (*np.moveaxis(x, -1, 0), *np.moveaxis(xi, -1, 0))

    def h(self, x, xi):
        return np.array(self._h(*self._cols(x, xi)))

    def grad_x(self, x, xi):
        c = self._cols(x, xi)
        return np.stack([np.asarray(g(*c)) for g in self._gx], axis=-1)

    def grad_xi(self, x, xi):
        c = self._cols(x, xi)
        return np.stack([np.asarray(g(*c)) for g in self._gxi], axis=-1)

    def _mat(self, table, x, xi):
        c = self._cols(x, xi)
        return np.stack([np.stack([np.asarray(f(*c)) for f in row], axis=-1) for row in table], axis=-2)

    def hess_x(self, x, xi):
        return self._mat(self._hxx, x, xi)

    def hess_mixed(self, x, xi):
        return self._mat(self._hmix, x, xi)

    def hess_xi(self, x, xi):
        return self._mat(self._hxixi, x, xi)


def compile_symbol(text: str, dim: int, params: Mapping[str, float] | None = None) -> CompiledSymbol:
    xn = variable_names("x", dim)
    pn = variable_names("xi", dim)
    expr = parse(text, xn + pn, params)
    xs = [sp.Symbol(n, real=True) for n in xn]
    ps = [sp.Symbol(n, real=True) for n in pn]
    allv = xs + ps
    d = lambda e, s: _drop_dirac(sp.diff(e, s))  # noqa: E731
    gx = [d(expr, s) for s in xs]
    gp = [d(expr, s) for s in ps]
    vec = lambda e: _vectorize(e, allv)  # noqa: E731
    return CompiledSymbol(
        text=text,
        dim=dim,
        _h=vec(expr),
        _gx=tuple(vec(g) for g in gx),
        _gxi=tuple(vec(g) for g in gp),
        _hxx=tuple(tuple(vec(d(g, s)) for s in xs) for g in gx),
        _hmix=tuple(tuple(vec(d(g, s)) for s in ps) for g in gx),
        _hxixi=tuple(tuple(vec(d(g, s)) for s in ps) for g in gp),
    )
