"""Residual checks for the pressureless (monokinetic) fluid systems.

Given sampled fields n(x, t) and v(x, t) on a uniform space-time grid, the
functions here evaluate, with second-order central differences at interior
nodes,

* the mass and momentum equations
  ``d_t n + div(n u) = 0`` and ``d_t(n v) + div(u (x) n v) + n grad_x H(x, v) = 0``
  with ``u = grad_xi H(x, v)``,
* the weighted moment equation for a weight sigma(v),
* the same system rewritten for the generalized velocity u with a modified
  force f (Euler form with source).

Nothing is time-stepped: an exact or reconstructed solution goes in and the
discrete residual comes out, so convergence under grid refinement is the test.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .expressions import compile_scalar
from .symbols import HamiltonianSymbol

Array = np.ndarray

MIN_NODES = 3


class FluidGridError(ValueError):
    pass


def _check_axis(a: Array, what: str) -> Array:
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size < MIN_NODES:
        raise FluidGridError(f"{what} needs at least {MIN_NODES} nodes")
    h = np.diff(a)
    if np.any(h <= 0):
        raise FluidGridError(f"{what} must be strictly increasing")
    if np.max(np.abs(h - h[0])) > 1e-9 * (abs(h[0]) + np.max(np.abs(a))):
        raise FluidGridError(f"{what} must be uniformly spaced")
    return a


@dataclass(frozen=True)
class FluidField:
    """Density and velocity on a tensor grid; array layout is ``(t, x_1, ..., x_d[, component])``."""

    axes: tuple[Array, ...]
    t: Array
    n: Array
    v: Array

    def __post_init__(self) -> None:
        axes = tuple(_check_axis(a, f"x axis {i}") for i, a in enumerate(self.axes))
        t = _check_axis(self.t, "time axis")
        shape = (t.size,) + tuple(a.size for a in axes)
        n = np.asarray(self.n, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if v.shape == shape and len(axes) == 1:
            v = v[..., None]
        if n.shape != shape or v.shape != shape + (len(axes),):
            raise FluidGridError(f"expected n of shape {shape} and v of shape {shape + (len(axes),)}")
        if np.any(n < 0) or not np.all(np.isfinite(n)) or not np.all(np.isfinite(v)):
            raise ValueError("n must be finite and nonnegative, v finite")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def spacing(self) -> tuple[float, ...]:
        """(dt, dx_1, ..., dx_d)."""
        return tuple(float(a[1] - a[0]) for a in (self.t, *self.axes))

    def positions(self) -> Array:
        """Node positions broadcast over time, shape ``(nt, nx_1, ..., nx_d, d)``."""
        mesh = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)
        return np.broadcast_to(mesh, (self.t.size,) + mesh.shape)

    def interior_axes(self) -> tuple[Array, tuple[Array, ...]]:
        return self.t[1:-1], tuple(a[1:-1] for a in self.axes)

    @classmethod
    def from_functions(
        cls,
        n: Callable[[Array, Array], Array],
        v: Callable[[Array, Array], Array],
        axes: Sequence[Array],
        t: Array,
    ) -> "FluidField":
        """Sample ``n(x, t)`` and ``v(x, t)``; ``x`` arrives with shape ``(..., d)`` and ``t`` broadcast to match."""
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        t = np.asarray(t, dtype=float)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        X = np.broadcast_to(mesh, (t.size,) + mesh.shape)
        T = np.broadcast_to(t.reshape((-1,) + (1,) * len(axes)), X.shape[:-1])
        nv = np.asarray(n(X, T), dtype=float)
        vv = np.asarray(v(X, T), dtype=float)
        if vv.shape == X.shape[:-1]:
            vv = vv[..., None]
        return cls(axes, t, nv, vv)


@dataclass(frozen=True)
class WeightFunction:
    """A weight sigma(v) with its gradient, used in the generalized moment equation.

    The growth conditions that make the weak formulation meaningful for
    unbounded velocities are not checked; on a bounded grid every C^1 weight
    qualifies. ``admissibility_note`` keeps that caveat with the object.
    """

    sigma: Callable[[Array], Array]
    grad_sigma: Callable[[Array], Array]
    dim: int = 1
    label: str = "sigma"
    admissibility_note: str = "growth condition at |v| -> infinity not checked; bounded grids only"
    check_points: int = field(default=16, repr=False)

    def __post_init__(self) -> None:
        rng = np.random.default_rng(7)
        v = rng.uniform(-2.0, 2.0, size=(self.check_points, self.dim))
        g = np.asarray(self.grad_sigma(v), dtype=float).reshape(self.check_points, self.dim)
        step = 1e-6
        fd = np.empty_like(g)
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = step
            fd[:, j] = (np.asarray(self.sigma(v + e)) - np.asarray(self.sigma(v - e))) / (2 * step)
        err = np.max(np.abs(fd - g) / (1.0 + np.abs(g)))
        if not err <= 1e-6:
            raise ValueError(f"grad_sigma of {self.label!r} disagrees with finite differences (max rel. error {err:.2e})")

    @classmethod
    def one(cls, dim: int = 1) -> "WeightFunction":
        return cls(lambda v: np.ones(np.shape(v)[:-1]), lambda v: np.zeros(np.shape(v)), dim, "1")

    @classmethod
    def component(cls, i: int, dim: int = 1) -> "WeightFunction":
        def grad(v):
            g = np.zeros(np.shape(v))
            g[..., i] = 1.0
            return g

        return cls(lambda v: np.asarray(v)[..., i], grad, dim, f"v_{i + 1}")

    @classmethod
    def kinetic(cls, dim: int = 1) -> "WeightFunction":
        return cls(lambda v: 0.5 * np.sum(np.asarray(v) ** 2, axis=-1), lambda v: np.array(v, dtype=float), dim, "|v|^2/2")

    @classmethod
    def from_expression(cls, text: str, dim: int = 1, params: Mapping[str, float] | None = None) -> "WeightFunction":
        """Weight from an expression in ``v`` (d = 1) or ``v1 ... vd``."""
        c = compile_scalar(text, dim, prefix="v", params=params)
        return cls(c.value, c.grad, dim, text)


# ---------------------------------------------------------------------------
# stencils

def _diff(a: Array, axis: int, h: float, ngrid: int) -> Array:
    """Central difference along grid axis ``axis``, cropped to interior nodes on every grid axis."""
    idx: list[slice] = []
    for g in range(ngrid):
        idx.append(slice(None) if g == axis else slice(1, -1))
    a = a[tuple(idx)]
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    return (a[tuple(hi)] - a[tuple(lo)]) / (2.0 * h)


def _interior(a: Array, ngrid: int) -> Array:
    return a[(slice(1, -1),) * ngrid]


def _div(flux: Array, spacing: Sequence[float], ngrid: int) -> Array:
    """Divergence of a flux whose last axis indexes the spatial direction."""
    out = 0.0
    for j in range(ngrid - 1):
        out = out + _diff(flux[..., j], j + 1, spacing[j + 1], ngrid)
    return out


def _symbol_fields(H: HamiltonianSymbol, fld: FluidField) -> tuple[Array, Array]:
    if H.dim != fld.dim:
        raise ValueError(f"symbol dimension {H.dim} does not match field dimension {fld.dim}")
    X = fld.positions()
    u = np.asarray(H.grad_xi(X, fld.v), dtype=float)
    gy = np.asarray(H.grad_x(X, fld.v), dtype=float)
    return u, gy


@dataclass
class EulerResidual:
    t: Array
    axes: tuple[Array, ...]
    mass: Array       # (nt-2, *(nx-2))
    momentum: Array   # (nt-2, *(nx-2), d)

    def max_abs(self) -> tuple[float, float]:
        return float(np.max(np.abs(self.mass))), float(np.max(np.abs(self.momentum)))


def euler_residual(H: HamiltonianSymbol, fld: FluidField) -> EulerResidual:
    """Discrete residuals of the mass and momentum equations at interior nodes."""
    u, gy = _symbol_fields(H, fld)
    sp = fld.spacing
    ng = fld.dim + 1
    n = fld.n
    mass = _diff(n, 0, sp[0], ng) + _div(n[..., None] * u, sp, ng)
    d = fld.dim
    mom = np.empty(mass.shape + (d,))
    for i in range(d):
        q = n * fld.v[..., i]
        mom[..., i] = _diff(q, 0, sp[0], ng) + _div(u * q[..., None], sp, ng) + _interior(n * gy[..., i], ng)
    ti, xi = fld.interior_axes()
    return EulerResidual(ti, xi, mass, mom)


def generalized_moment_residual(H: HamiltonianSymbol, fld: FluidField, w: WeightFunction) -> Array:
    """Residual of d_t(n sigma(v)) + div(n sigma(v) u) + n grad sigma(v) . grad_x H at interior nodes."""
    if w.dim != fld.dim:
        raise ValueError("weight and field dimensions differ")
    u, gy = _symbol_fields(H, fld)
    sp = fld.spacing
    ng = fld.dim + 1
    q = fld.n * np.asarray(w.sigma(fld.v), dtype=float)
    src = fld.n * np.sum(np.asarray(w.grad_sigma(fld.v), dtype=float) * gy, axis=-1)
    return _diff(q, 0, sp[0], ng) + _div(u * q[..., None], sp, ng) + _interior(src, ng)


@dataclass
class ConservativeFields:
    u: Array          # generalized velocity at every node
    f: Array          # modified force at every node
    mass: Array       # interior residual of d_t n + div(n u)
    momentum: Array   # interior residual of d_t(n u) + div(n u (x) u) + n f

    def max_abs(self) -> tuple[float, float]:
        return float(np.max(np.abs(self.mass))), float(np.max(np.abs(self.momentum)))


def modified_force(H: HamiltonianSymbol, x: Array, v: Array) -> Array:
    """f_i = sum_k H_{xi_k xi_i} H_{x_k} - sum_l H_{xi_l} d_{x_l} H_{xi_i}, evaluated at (x, v).

    For H = omega(xi) + V(x) this is D^2 omega(v) grad V(x).
    """
    if H.hess_xi is None or H.hess_mixed is None:
        warnings.warn(
            f"symbol {H.label!r} has no analytic Hessians; the force term uses finite differences",
            RuntimeWarning,
            stacklevel=2,
        )
    _, hmix, hpp = H.second_derivatives(x, v)
    gx = np.asarray(H.grad_x(x, v), dtype=float)
    gp = np.asarray(H.grad_xi(x, v), dtype=float)
    # hmix[..., l, i] = d2 H / dx_l dxi_i
    return np.einsum("...ki,...k->...i", hpp, gx) - np.einsum("...l,...li->...i", gp, hmix)


def to_conservative(H: HamiltonianSymbol, fld: FluidField) -> ConservativeFields:
    """Rewrite (n, v) in terms of the generalized velocity u = grad_xi H(x, v) and check the result."""
    X = fld.positions()
    u, _ = _symbol_fields(H, fld)
    f = modified_force(H, X, fld.v)
    sp = fld.spacing
    ng = fld.dim + 1
    n = fld.n
    mass = _diff(n, 0, sp[0], ng) + _div(n[..., None] * u, sp, ng)
    mom = np.empty(mass.shape + (fld.dim,))
    for i in range(fld.dim):
        q = n * u[..., i]
        mom[..., i] = _diff(q, 0, sp[0], ng) + _div(u * q[..., None], sp, ng) + _interior(n * f[..., i], ng)
    return ConservativeFields(u, f, mass, mom)


def convergence_ratio(coarse: float, fine: float) -> float:
    """Ratio of residual norms under h-halving; about 4 for a second-order stencil."""
    return float(coarse / fine) if fine > 0 else float("inf")
