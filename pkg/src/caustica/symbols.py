"""Hamiltonian symbols, WKB initial data and the scenario container.

Every callable here is vectorised over leading axes: ``x`` and ``xi`` carry
shape ``(..., d)``; scalars come back as ``(...)``, gradients as
``(..., d)`` and Hessians as ``(..., d, d)``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import integrate as sint

from .expressions import CompiledScalar, compile_scalar, compile_symbol

Array = np.ndarray
Field = Callable[[Array], Array]
PhaseField = Callable[[Array, Array], Array]

BUILTIN_NAMES = (
    "free_quadratic",
    "schrodinger_potential",
    "airy_cubic",
    "bethe_salpeter",
    "eikonal",
    "harmonic_oscillator",
    "airy_variable",
)

FD_STEP = 1e-5


class ScenarioError(ValueError):
    """Malformed scenario, symbol request or tolerance set."""


class SymbolDomainError(ValueError):
    """A symbol was evaluated where it is not differentiable."""


def _fd_jacobian(fn: Callable[[Array], Array], v: Array, step: Array) -> Array:
    """Central-difference Jacobian of a vector field, shape (..., m, d) -> d last."""
    d = v.shape[-1]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        hj = step[..., None] * e
        cols.append((fn(v + hj) - fn(v - hj)) / (2.0 * step[..., None]))
    return np.stack(cols, axis=-1)


def _rel_step(v: Array) -> Array:
    return FD_STEP * (1.0 + np.linalg.norm(v, axis=-1))


@dataclass(frozen=True)
class Potential:
    """A scalar field V(x) (or a coefficient a(x)) with gradient and Hessian."""

    value: Field
    grad: Field
    hess: Field | None = None
    label: str = "V"

    @classmethod
    def zero(cls, dim: int) -> "Potential":
        return cls(
            value=lambda x: np.zeros(np.shape(x)[:-1]),
            grad=lambda x: np.zeros(np.shape(x)),
            hess=lambda x: np.zeros(np.shape(x) + (dim,)),
            label="0",
        )

    @classmethod
    def constant(cls, c: float, dim: int) -> "Potential":
        return cls(
            value=lambda x: np.full(np.shape(x)[:-1], float(c)),
            grad=lambda x: np.zeros(np.shape(x)),
            hess=lambda x: np.zeros(np.shape(x) + (dim,)),
            label=repr(float(c)),
        )

    @classmethod
    def from_expression(cls, text: str, dim: int, params: Mapping[str, float] | None = None) -> "Potential":
        c = compile_scalar(text, dim, "x", params)
        return cls(value=c.value, grad=c.grad, hess=c.hess, label=text)

    @property
    def is_zero(self) -> bool:
        return self.label in ("0", "0.0")

    def hessian(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if self.hess is not None:
            return np.asarray(self.hess(x))
        return _fd_jacobian(self.grad, x, _rel_step(x))


@dataclass(frozen=True)
class HamiltonianSymbol:
    """A classical symbol H(x, xi) with its first (and optionally second) derivatives.

    ``kinetic`` and ``potential`` are set for separable symbols
    H = omega(xi) + V(x); the spectral oracle and the symplectic integrator
    rely on them.  Hessians that are not supplied are replaced by central
    differences of the gradients.
    """

    dim: int
    h: PhaseField
    grad_x: PhaseField
    grad_xi: PhaseField
    hess_xi: PhaseField | None = None
    hess_mixed: PhaseField | None = None
    hess_x: PhaseField | None = None
    label: str = "custom"
    kinetic: Field | None = None
    potential: Potential | None = None
    singular_at_zero: bool = False

    @property
    def separable(self) -> bool:
        return self.kinetic is not None

    def second_derivatives(self, x: Array, xi: Array) -> tuple[Array, Array, Array]:
        """Return (H_xx, H_x xi, H_xi xi); entry [i, j] of the mixed block is d2H/dx_i dxi_j."""
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        x, xi = np.broadcast_arrays(x, xi)
        if self.hess_x is not None:
            hxx = np.asarray(self.hess_x(x, xi))
        else:
            hxx = _fd_jacobian(lambda y: self.grad_x(y, xi), x, _rel_step(x))
        if self.hess_mixed is not None:
            hmix = np.asarray(self.hess_mixed(x, xi))
        else:
            # d/dx_i of (grad_xi)_j: the FD Jacobian puts x on the last axis.
            hmix = np.swapaxes(_fd_jacobian(lambda y: self.grad_xi(y, xi), x, _rel_step(x)), -1, -2)
        if self.hess_xi is not None:
            hpp = np.asarray(self.hess_xi(x, xi))
        else:
            hpp = _fd_jacobian(lambda p: self.grad_xi(x, p), xi, _rel_step(xi))
        return hxx, hmix, hpp


def _as_potential(value: Any, dim: int, params: Mapping[str, float] | None, what: str) -> Potential:
    if isinstance(value, Potential):
        return value
    if isinstance(value, str):
        return Potential.from_expression(value, dim, params)
    if isinstance(value, (int, float)):
        return Potential.constant(float(value), dim)
    raise ScenarioError(f"{what} must be a Potential, an expression string or a number")


def _eye(shape: tuple[int, ...], dim: int) -> Array:
    return np.broadcast_to(np.eye(dim), shape + (dim, dim)).copy()


def _free_like(dim: int, V: Potential, label: str) -> HamiltonianSymbol:
    def h(x, xi):
        return 0.5 * np.sum(np.asarray(xi) ** 2, axis=-1) + V.value(x)

    return HamiltonianSymbol(
        dim=dim,
        h=h,
        grad_x=lambda x, xi: np.broadcast_to(V.grad(np.asarray(x, dtype=float)), np.broadcast_shapes(np.shape(x), np.shape(xi))).copy(),
        grad_xi=lambda x, xi: np.broadcast_to(np.asarray(xi, dtype=float), np.broadcast_shapes(np.shape(x), np.shape(xi))).copy(),
        hess_xi=lambda x, xi: _eye(np.broadcast_shapes(np.shape(x), np.shape(xi))[:-1], dim),
        hess_mixed=lambda x, xi: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(xi)) + (dim,)),
        hess_x=lambda x, xi: np.broadcast_to(
            V.hessian(np.asarray(x, dtype=float)), np.broadcast_shapes(np.shape(x), np.shape(xi)) + (dim,)
        ).copy(),
        label=label,
        kinetic=lambda xi: 0.5 * np.sum(np.asarray(xi) ** 2, axis=-1),
        potential=V,
    )


def _airy_cubic() -> HamiltonianSymbol:
    def shape(x, xi):
        return np.broadcast_shapes(np.shape(x), np.shape(xi))

    return HamiltonianSymbol(
        dim=1,
        h=lambda x, xi: np.broadcast_to(np.asarray(xi)[..., 0] ** 3 / 3.0, shape(x, xi)[:-1]).copy(),
        grad_x=lambda x, xi: np.zeros(shape(x, xi)),
        grad_xi=lambda x, xi: np.broadcast_to(np.asarray(xi, dtype=float) ** 2, shape(x, xi)).copy(),
        hess_xi=lambda x, xi: np.broadcast_to(2.0 * np.asarray(xi, dtype=float)[..., None], shape(x, xi) + (1,)).copy(),
        hess_mixed=lambda x, xi: np.zeros(shape(x, xi) + (1,)),
        hess_x=lambda x, xi: np.zeros(shape(x, xi) + (1,)),
        label="airy_cubic",
        kinetic=lambda xi: np.asarray(xi)[..., 0] ** 3 / 3.0,
        potential=Potential.zero(1),
    )


def _bethe_salpeter(dim: int, V: Potential) -> HamiltonianSymbol:
    def s(xi):
        return np.sqrt(0.5 * np.sum(np.asarray(xi, dtype=float) ** 2, axis=-1) + 1.0)

    def shape(x, xi):
        return np.broadcast_shapes(np.shape(x), np.shape(xi))

    def grad_xi(x, xi):
        xi = np.asarray(xi, dtype=float)
        return np.broadcast_to(xi / (2.0 * s(xi)[..., None]), shape(x, xi)).copy()

    def hess_xi(x, xi):
        xi = np.asarray(xi, dtype=float)
        sv = s(xi)[..., None, None]
        out = np.eye(dim) / (2.0 * sv) - xi[..., :, None] * xi[..., None, :] / (4.0 * sv**3)
        return np.broadcast_to(out, shape(x, xi) + (dim,)).copy()

    return HamiltonianSymbol(
        dim=dim,
        h=lambda x, xi: s(xi) + V.value(np.asarray(x, dtype=float)),
        grad_x=lambda x, xi: np.broadcast_to(V.grad(np.asarray(x, dtype=float)), shape(x, xi)).copy(),
        grad_xi=grad_xi,
        hess_xi=hess_xi,
        hess_mixed=lambda x, xi: np.zeros(shape(x, xi) + (dim,)),
        hess_x=lambda x, xi: np.broadcast_to(V.hessian(np.asarray(x, dtype=float)), shape(x, xi) + (dim,)).copy(),
        label="bethe_salpeter",
        kinetic=s,
        potential=V,
    )


def _eikonal(dim: int, a: Potential) -> HamiltonianSymbol:
    def norm(xi):
        r = np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)
        if np.any(r == 0.0):
            raise SymbolDomainError("eikonal symbol a(x)|xi| is not differentiable at xi = 0")
        return r

    def shape(x, xi):
        return np.broadcast_shapes(np.shape(x), np.shape(xi))

    def h(x, xi):
        return a.value(np.asarray(x, dtype=float)) * np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)

    def grad_x(x, xi):
        r = np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)
        return np.broadcast_to(a.grad(np.asarray(x, dtype=float)) * r[..., None], shape(x, xi)).copy()

    def grad_xi(x, xi):
        xi = np.asarray(xi, dtype=float)
        return a.value(np.asarray(x, dtype=float))[..., None] * xi / norm(xi)[..., None]

    def hess_xi(x, xi):
        xi = np.asarray(xi, dtype=float)
        r = norm(xi)[..., None, None]
        av = a.value(np.asarray(x, dtype=float))[..., None, None]
        return av * (np.eye(dim) / r - xi[..., :, None] * xi[..., None, :] / r**3)

    def hess_mixed(x, xi):
        xi = np.asarray(xi, dtype=float)
        u = xi / norm(xi)[..., None]
        return a.grad(np.asarray(x, dtype=float))[..., :, None] * u[..., None, :]

    def hess_x(x, xi):
        r = np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)
        return a.hessian(np.asarray(x, dtype=float)) * r[..., None, None]

    return HamiltonianSymbol(
        dim=dim,
        h=h,
        grad_x=grad_x,
        grad_xi=grad_xi,
        hess_xi=hess_xi,
        hess_mixed=hess_mixed,
        hess_x=hess_x,
        label="eikonal",
        # a == 1 is separable with omega(xi) = |xi|, which the spectral solver can use
        kinetic=(lambda xi: np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)) if a.label == "1.0" else None,
        potential=Potential.zero(dim) if a.label == "1.0" else None,
        singular_at_zero=True,
    )


def _harmonic(dim: int) -> HamiltonianSymbol:
    V = Potential(
        value=lambda x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1),
        grad=lambda x: np.asarray(x, dtype=float).copy(),
        hess=lambda x: _eye(np.shape(x)[:-1], dim),
        label="|x|**2/2",
    )
    sym = _free_like(dim, V, "harmonic_oscillator")
    return sym


def _airy_variable() -> HamiltonianSymbol:
    def shape(x, xi):
        return np.broadcast_shapes(np.shape(x), np.shape(xi))

    def parts(x, xi):
        x, xi = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(xi, dtype=float))
        return x, xi

    def h(x, xi):
        x, xi = parts(x, xi)
        return -x[..., 0] * xi[..., 0] ** 3

    def grad_x(x, xi):
        x, xi = parts(x, xi)
        return -(xi**3)

    def grad_xi(x, xi):
        x, xi = parts(x, xi)
        return -3.0 * x * xi**2

    def hess_xi(x, xi):
        x, xi = parts(x, xi)
        return (-6.0 * x * xi)[..., None]

    def hess_mixed(x, xi):
        x, xi = parts(x, xi)
        return (-3.0 * xi**2)[..., None]

    return HamiltonianSymbol(
        dim=1,
        h=h,
        grad_x=grad_x,
        grad_xi=grad_xi,
        hess_xi=hess_xi,
        hess_mixed=hess_mixed,
        hess_x=lambda x, xi: np.zeros(shape(x, xi) + (1,)),
        label="airy_variable",
    )


def builtin_symbol(name: str, params: Mapping[str, Any] | None = None, **kwargs: Any) -> HamiltonianSymbol:
    """Construct one of the shipped symbols.

    ``params`` (merged with keyword arguments) may hold ``d`` (dimension),
    ``potential`` for the Schroedinger-type symbols and ``coefficient`` for
    the eikonal symbol.  Potentials and coefficients are ``Potential``
    objects, expression strings or numbers; ``expr_params`` feeds named
    constants into expression strings.
    """
    p = dict(params or {})
    p.update(kwargs)
    if name not in BUILTIN_NAMES:
        raise ScenarioError(f"unknown symbol {name!r}; expected one of {', '.join(BUILTIN_NAMES)}")
    dim = int(p.get("d", 1))
    if dim < 1:
        raise ScenarioError("dimension d must be a positive integer")
    eparams = p.get("expr_params")
    if name in ("airy_cubic", "airy_variable") and dim != 1:
        raise ScenarioError(f"{name} is defined for d = 1 only")
    if name == "free_quadratic":
        V = _as_potential(p["potential"], dim, eparams, "potential") if "potential" in p else Potential.zero(dim)
        return _free_like(dim, V, "free_quadratic")
    if name == "schrodinger_potential":
        if "potential" not in p:
            raise ScenarioError("schrodinger_potential requires a 'potential' parameter")
        return _free_like(dim, _as_potential(p["potential"], dim, eparams, "potential"), "schrodinger_potential")
    if name == "airy_cubic":
        return _airy_cubic()
    if name == "bethe_salpeter":
        V = _as_potential(p["potential"], dim, eparams, "potential") if "potential" in p else Potential.zero(dim)
        return _bethe_salpeter(dim, V)
    if name == "eikonal":
        if "coefficient" not in p:
            raise ScenarioError("eikonal requires a 'coefficient' parameter a(x)")
        return _eikonal(dim, _as_potential(p["coefficient"], dim, eparams, "coefficient"))
    if name == "harmonic_oscillator":
        return _harmonic(dim)
    return _airy_variable()


def symbol_from_expression(text: str, dim: int = 1, params: Mapping[str, float] | None = None, label: str = "custom") -> HamiltonianSymbol:
    """Compile ``H(x, xi)`` given as an expression in ``x``/``xi`` (or ``x1.., xi1..``)."""
    c = compile_symbol(text, dim, params)
    return HamiltonianSymbol(
        dim=dim,
        h=c.h,
        grad_x=c.grad_x,
        grad_xi=c.grad_xi,
        hess_xi=c.hess_xi,
        hess_mixed=c.hess_mixed,
        hess_x=c.hess_x,
        label=label,
    )


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lo) != len(self.hi) or not self.lo:
            raise ScenarioError("box bounds must be nonempty and of equal length")
        if not all(np.isfinite(self.lo)) or not all(np.isfinite(self.hi)):
            raise ScenarioError("box bounds must be finite")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ScenarioError(f"empty box lo={self.lo} hi={self.hi}")

    @classmethod
    def parse(cls, value: Any, dim: int, what: str) -> "Box":
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{what} is not numeric: {value!r}") from exc
        if arr.shape == (2,) and dim == 1:
            arr = arr[None, :]
        if arr.shape != (dim, 2):
            raise ScenarioError(f"{what} must be a list of {dim} [lo, hi] pairs")
        return cls(tuple(arr[:, 0].tolist()), tuple(arr[:, 1].tolist()))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self) -> Array:
        return np.asarray(self.lo)

    @property
    def hi_arr(self) -> Array:
        return np.asarray(self.hi)

    def contains(self, p: Array) -> Array:
        p = np.asarray(p)
        return np.all((p >= self.lo_arr) & (p <= self.hi_arr), axis=-1)

    def to_list(self) -> list[list[float]]:
        return [[a, b] for a, b in zip(self.lo, self.hi)]


@dataclass(frozen=True)
class InitialData:
    """WKB initial data: density ``n_I``, phase ``S_I`` and its derivatives.

    ``kinks`` lists the (d = 1) points where ``S_I`` fails to be C^1; the
    gradient there is the average of the one-sided values.
    """

    dim: int
    n_I: Field
    S_I: Field
    grad_S_I: Field
    hess_S_I: Field | None = None
    mass: float = float("nan")
    kinks: tuple[float, ...] = ()
    n_text: str | None = None
    S_text: str | None = None

    def hessian(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if self.hess_S_I is not None:
            return np.asarray(self.hess_S_I(x))
        return _fd_jacobian(self.grad_S_I, x, _rel_step(x))

    @classmethod
    def from_expressions(
        cls,
        n_text: str,
        S_text: str,
        dim: int = 1,
        params: Mapping[str, float] | None = None,
        mass_box: Box | None = None,
    ) -> "InitialData":
        n = compile_scalar(n_text, dim, "x", params)
        S = compile_scalar(S_text, dim, "x", params)
        kinks = tuple(sorted(set(S.kinks) | set(n.kinks)))
        mass = integrate_mass(n.value, mass_box, kinks) if mass_box is not None else float("nan")
        return cls(dim, n.value, S.value, S.grad, S.hess, mass, kinks, n_text, S_text)


def integrate_mass(n: Field, box: Box, breakpoints: Sequence[float] = ()) -> float:
    """Integral of ``n`` over ``box`` (adaptive in d = 1, tensor Gauss-Legendre above)."""
    if box.dim == 1:
        lo, hi = box.lo[0], box.hi[0]
        pts = [p for p in breakpoints if lo < p < hi]
        val, _ = sint.quad(lambda s: float(n(np.array([[s]]))[0]), lo, hi, points=pts or None, limit=400, epsabs=1e-14, epsrel=1e-12)
        return float(val)
    nodes, weights = np.polynomial.legendre.leggauss(64)
    grids = []
    wts = []
    for a, b in zip(box.lo, box.hi):
        grids.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
        wts.append(0.5 * (b - a) * weights)
    mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1)
    w = wts[0]
    for extra in wts[1:]:
        w = np.multiply.outer(w, extra)
    return float(np.sum(n(mesh) * w))


@dataclass(frozen=True)
class Tolerances:
    ode_rtol: float = 1e-10
    ode_atol: float = 1e-12
    root: float = 1e-10
    dedupe: float = 1e-6
    caustic: float = 1e-6
    mass: float = 1e-10

    def __post_init__(self) -> None:
        for name in ("ode_rtol", "ode_atol", "root", "dedupe", "caustic", "mass"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and np.isfinite(v) and v > 0):
                raise ScenarioError(f"tolerance {name} must be strictly positive, got {v!r}")

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("ode_rtol", "ode_atol", "root", "dedupe", "caustic", "mass")}


@dataclass(frozen=True)
class Scenario:
    """One reproducible experiment: dynamics, data, query region and tolerances."""

    hamiltonian: HamiltonianSymbol
    initial: InitialData
    region: Box
    times: tuple[float, ...]
    tolerances: Tolerances = field(default_factory=Tolerances)
    xi_box: Box | None = None
    x0_box: Box | None = None
    t_range: tuple[float, float] | None = None
    name: str = "scenario"
    expect_blowup: bool = False
    document: Mapping[str, Any] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.xi_box is None:
            raise ScenarioError("xi_box is required")
        d = self.hamiltonian.dim
        for what, box in (("region", self.region), ("xi_box", self.xi_box), ("x0_box", self.x0_box)):
            if box is not None and box.dim != d:
                raise ScenarioError(f"{what} has dimension {box.dim}, symbol has {d}")
        if self.initial.dim != d:
            raise ScenarioError("initial data and symbol dimensions differ")
        if self.t_range is not None and not (self.t_range[0] < self.t_range[1]):
            raise ScenarioError("t_range must satisfy t0 < t1")

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    @property
    def footpoint_box(self) -> Box:
        return self.x0_box if self.x0_box is not None else self.region

    @property
    def horizon(self) -> float:
        ts = [abs(t) for t in self.times]
        if self.t_range is not None:
            ts += [abs(self.t_range[0]), abs(self.t_range[1])]
        return max(ts) if ts else 0.0

    def with_tolerances(self, **changes: float) -> "Scenario":
        tol = Tolerances(**{**self.tolerances.to_dict(), **changes})
        doc = None
        if self.document is not None:
            doc = copy.deepcopy(dict(self.document))
            doc["tolerances"] = {**doc.get("tolerances", {}), **changes}
        return Scenario(
            self.hamiltonian, self.initial, self.region, self.times, tol, self.xi_box, self.x0_box,
            self.t_range, self.name, self.expect_blowup, doc,
        )


def scenario_from_document(doc: Mapping[str, Any]) -> Scenario:
    """Build a Scenario from its JSON document form."""
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a JSON object")
    try:
        dim = int(doc.get("dim", 1))
        ham = doc["hamiltonian"]
        init = doc["initial"]
        region_doc = doc["region"]
        xi_doc = doc["xi_box"]
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing field {exc.args[0]!r}") from exc
    if not isinstance(ham, Mapping) or "name" not in ham:
        raise ScenarioError("hamiltonian must be an object with a 'name'")
    hparams = dict(ham.get("params", {}))
    if ham["name"] == "custom":
        if "expr" not in ham:
            raise ScenarioError("custom hamiltonian needs an 'expr'")
        H = symbol_from_expression(ham["expr"], dim, hparams, label="custom")
    else:
        hparams.setdefault("d", dim)
        if "expr_params" not in hparams and "constants" in ham:
            hparams["expr_params"] = dict(ham["constants"])
        H = builtin_symbol(ham["name"], hparams)
    if isinstance(region_doc, Mapping):
        region = Box.parse(region_doc.get("x"), dim, "region.x")
        t_range = region_doc.get("t_range")
    else:
        region = Box.parse(region_doc, dim, "region")
        t_range = None
    if t_range is not None:
        if len(t_range) != 2:
            raise ScenarioError("region.t_range must be [t0, t1]")
        t_range = (float(t_range[0]), float(t_range[1]))
    x0_box = Box.parse(doc["x0_box"], dim, "x0_box") if "x0_box" in doc else None
    xi_box = Box.parse(xi_doc, dim, "xi_box")
    times = tuple(float(t) for t in doc.get("times", ()))
    if not all(np.isfinite(times)):
        raise ScenarioError("times must be finite")
    tol = Tolerances(**{k: float(v) for k, v in doc.get("tolerances", {}).items()}) if "tolerances" in doc else Tolerances()
    if not isinstance(init, Mapping) or "n_I" not in init or "S_I" not in init:
        raise ScenarioError("initial must give expression strings 'n_I' and 'S_I'")
    initial = InitialData.from_expressions(init["n_I"], init["S_I"], dim, init.get("params"), x0_box or region)
    return Scenario(
        hamiltonian=H,
        initial=initial,
        region=region,
        times=times,
        tolerances=tol,
        xi_box=xi_box,
        x0_box=x0_box,
        t_range=t_range,
        name=str(doc.get("name", "scenario")),
        expect_blowup=bool(doc.get("expect_blowup", False)),
        document=copy.deepcopy(dict(doc)),
    )


def dumps_document(doc: Mapping[str, Any]) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_document(doc)


def dump_scenario(s: Scenario, path: str | Path) -> None:
    if s.document is None:
        raise ScenarioError("scenario was built in code and has no document form")
    Path(path).write_text(dumps_document(s.document))


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    value: float = float("nan")


@dataclass
class ValidationReport:
    scenario: str
    checks: list[Check]
    blowup_times: list[float]
    unchecked: tuple[str, ...] = ("self-adjointness of the quantized operator is not checked computationally",)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "ok": self.ok,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail, "value": c.value if np.isfinite(c.value) else None}
                for c in self.checks
            ],
            "blowup_times": self.blowup_times,
            "unchecked": list(self.unchecked),
        }


def _sample(box: Box, n: int, rng: np.random.Generator) -> Array:
    return rng.uniform(box.lo_arr, box.hi_arr, size=(n, box.dim))


def gradient_consistency(H: HamiltonianSymbol, x: Array, xi: Array, step: float = FD_STEP) -> tuple[float, float]:
    """Worst relative mismatch of (grad_x, grad_xi) against central differences of h."""
    d = H.dim
    gx = np.asarray(H.grad_x(x, xi))
    gp = np.asarray(H.grad_xi(x, xi))
    fx = np.empty_like(gx)
    fp = np.empty_like(gp)
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        fx[..., j] = (H.h(x + e, xi) - H.h(x - e, xi)) / (2 * step)
        fp[..., j] = (H.h(x, xi + e) - H.h(x, xi - e)) / (2 * step)
    ex = np.max(np.abs(fx - gx) / np.maximum(1.0, np.abs(gx)))
    ep = np.max(np.abs(fp - gp) / np.maximum(1.0, np.abs(gp)))
    return float(ex), float(ep)


def validate_scenario(s: Scenario, n_samples: int = 200, seed: int = 0) -> ValidationReport:
    """Sample-based consistency checks; soft failures are recorded, never raised."""
    from .flow import flow_batch  # deferred: flow depends on this module

    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    H, I = s.hamiltonian, s.initial
    x = _sample(s.region, n_samples, rng)
    xi = _sample(s.xi_box, n_samples, rng)
    if H.singular_at_zero:
        small = np.linalg.norm(xi, axis=-1) < 1e-3
        xi[small] += 1e-2

    ex, ep = gradient_consistency(H, x, xi)
    checks.append(Check("grad_x_fd", ex <= 1e-6, "analytic grad_x vs central differences", ex))
    checks.append(Check("grad_xi_fd", ep <= 1e-6, "analytic grad_xi vs central differences", ep))
    if H.hess_xi is not None:
        hp = np.asarray(H.hess_xi(x, xi))
        asym = float(np.max(np.abs(hp - np.swapaxes(hp, -1, -2))))
        checks.append(Check("hess_xi_symmetric", asym <= 1e-12, "max |A - A^T|", asym))

    xs = np.linspace(s.region.lo_arr, s.region.hi_arr, 257) if s.dim == 1 else _sample(s.region, 2048, rng)
    n_vals = I.n_I(xs)
    nmin = float(np.min(n_vals))
    checks.append(Check("n_I_nonnegative", nmin >= 0.0 and bool(np.all(np.isfinite(n_vals))), "min n_I on samples", nmin))

    step = FD_STEP
    if I.kinks:
        far = np.all(np.abs(x[..., :1] - np.asarray(I.kinks)) > 10 * step, axis=-1)
        xg = x[far]
    else:
        xg = x
    g = np.asarray(I.grad_S_I(xg))
    fd = np.empty_like(g)
    for j in range(s.dim):
        e = np.zeros(s.dim)
        e[j] = step
        fd[..., j] = (I.S_I(xg + e) - I.S_I(xg - e)) / (2 * step)
    eg = float(np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g)))) if len(xg) else 0.0
    checks.append(Check("grad_S_I_fd", eg <= 1e-6, "grad S_I vs central differences away from kinks", eg))

    T = s.horizon
    blowups: list[float] = []
    if T > 0:
        n_probe = 33
        x0 = np.linspace(s.region.lo_arr, s.region.hi_arr, n_probe) if s.dim == 1 else _sample(s.region, n_probe, rng)
        xi0 = np.asarray(I.grad_S_I(x0))
        tol = s.tolerances
        fwd = flow_batch(H, x0, xi0, T, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
        bxi = _sample(s.xi_box, n_probe, rng)
        if H.singular_at_zero:
            bxi[np.linalg.norm(bxi, axis=-1) < 1e-3] += 1e-2
        bwd = flow_batch(H, x0, bxi, -T, rtol=tol.ode_rtol, atol=tol.ode_atol, with_jacobian=False)
        for res in (fwd, bwd):
            bad = ~res.ok
            blowups.extend(float(t) for t in res.t_event[bad] if np.isfinite(t))
            if np.any(bad & ~np.isfinite(res.t_event)):
                blowups.append(float("nan"))
        n_bad = int(np.sum(~fwd.ok) + np.sum(~bwd.ok))
        first = min((abs(t) for t in blowups if np.isfinite(t)), default=float("nan"))
        detail = f"{n_bad} of {2 * n_probe} probe flows failed over |t| <= {T:g}"
        if n_bad:
            detail += f"; earliest failure at |t| = {first:.9g}"
        checks.append(Check("global_flow", n_bad == 0, detail, first))
    return ValidationReport(s.name, checks, sorted(blowups, key=abs))
