"""Bicharacteristics, rays, accumulated action and variational Jacobians.

The augmented state integrated per trajectory is ``[x, xi, S, vec(Phi)]``
where ``Phi`` is the 2d x 2d derivative of the flow map with respect to
its initial point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._kernels import variational_rate
from .integrate import BLOWN_UP, NAN, OK, STATUS_NAMES, integrate_batch
from .symbols import HamiltonianSymbol, InitialData

Array = np.ndarray

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
NORM_LIMIT = 1e8


class FlowBlowupError(RuntimeError):
    def __init__(self, event: "BlowupEvent"):
        super().__init__(f"flow blew up at t = {event.t_event:.12g}: {event.diagnostic}")
        self.event = event


class SymbolNaNError(FloatingPointError):
    """The symbol (or one of its derivatives) produced a non-finite value at a finite point."""


@dataclass(frozen=True)
class PhasePoint:
    x: Array
    xi: Array

    def __post_init__(self) -> None:
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if x.shape != xi.shape or x.ndim != 1:
            raise ValueError("x and xi must be vectors of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xi))):
            raise ValueError("phase point components must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class BlowupEvent:
    t_event: float
    last_point: PhasePoint
    diagnostic: str


@dataclass(frozen=True)
class FlowState:
    point: PhasePoint
    action: float
    jac: Array
    t: float
    status: str
    event: BlowupEvent | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def status_text(self) -> str:
        if self.event is None:
            return self.status
        return f"{self.status}({self.event.t_event:.17g})"


@dataclass
class FlowBatch:
    """Vectorised flow result; row b is the trajectory started at row b."""

    x: Array
    xi: Array
    S: Array
    jac: Array | None
    t: Array
    status: Array
    t_event: Array
    n_steps: Array

    @property
    def ok(self) -> Array:
        return self.status == OK

    def status_text(self, b: int) -> str:
        code = int(self.status[b])
        if code == BLOWN_UP:
            return f"blown_up({self.t_event[b]:.17g})"
        return STATUS_NAMES[code]


def _augmented_rhs(H: HamiltonianSymbol, with_jacobian: bool):
    d = H.dim
    n2 = 2 * d

    def rhs(Y: Array) -> Array:
        x = Y[:, :d]
        p = Y[:, d:n2]
        gx = np.asarray(H.grad_x(x, p))
        gp = np.asarray(H.grad_xi(x, p))
        out = np.empty_like(Y)
        out[:, :d] = gp
        out[:, d:n2] = -gx
        out[:, n2] = np.sum(gp * p, axis=-1) - np.asarray(H.h(x, p))
        if with_jacobian:
            hxx, hmix, hpp = H.second_derivatives(x, p)
            J = np.ascontiguousarray(Y[:, n2 + 1 :]).reshape(-1, n2, n2)
            dJ = variational_rate(
                np.ascontiguousarray(hxx, dtype=float),
                np.ascontiguousarray(hmix, dtype=float),
                np.ascontiguousarray(hpp, dtype=float),
                J,
            )
            out[:, n2 + 1 :] = dJ.reshape(len(Y), n2 * n2)
        return out

    return rhs


def flow_batch(
    H: HamiltonianSymbol,
    x0: Array,
    xi0: Array,
    t: float | Array,
    *,
    S0: Array | None = None,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    with_jacobian: bool = True,
    max_steps: int = 200_000,
) -> FlowBatch:
    """Flow many phase points at once; ``t`` may differ per row and be negative."""
    d = H.dim
    x0 = np.asarray(x0, dtype=float).reshape(-1, d)
    xi0 = np.asarray(xi0, dtype=float).reshape(-1, d)
    nb = len(x0)
    n2 = 2 * d
    width = n2 + 1 + (n2 * n2 if with_jacobian else 0)
    Y0 = np.zeros((nb, width))
    Y0[:, :d] = x0
    Y0[:, d:n2] = xi0
    if S0 is not None:
        Y0[:, n2] = np.broadcast_to(np.asarray(S0, dtype=float), (nb,))
    if with_jacobian:
        Y0[:, n2 + 1 :] = np.eye(n2).ravel()
    res = integrate_batch(
        _augmented_rhs(H, with_jacobian), Y0, t, rtol=rtol, atol=atol, norm_dim=n2, norm_limit=NORM_LIMIT, max_steps=max_steps
    )
    Y = res.y
    jac = Y[:, n2 + 1 :].reshape(nb, n2, n2) if with_jacobian else None
    return FlowBatch(Y[:, :d], Y[:, d:n2], Y[:, n2], jac, res.t, res.status, res.t_event, res.n_steps)


def flow(
    H: HamiltonianSymbol,
    p0: PhasePoint,
    t: float,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> FlowState:
    """Integrate Hamilton's equations, the action and the variational system from ``p0``.

    A blown-up trajectory is returned (not raised) with ``status='blown_up'``
    and the last good point; a NaN from the symbol raises ``SymbolNaNError``.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    if p0.dim != H.dim:
        raise ValueError("phase point and symbol dimensions differ")
    b = flow_batch(H, p0.x, p0.xi, float(t), rtol=rtol, atol=atol)
    point = PhasePoint(b.x[0], b.xi[0])
    code = int(b.status[0])
    if code == NAN:
        raise SymbolNaNError(f"symbol {H.label} returned a non-finite value along the flow near t = {b.t[0]:.12g}")
    if code == OK:
        return FlowState(point, float(b.S[0]), b.jac[0], float(b.t[0]), "ok")
    diag = "phase-space norm exceeded 1e8 or step size collapsed" if code == BLOWN_UP else "step budget exhausted"
    event = BlowupEvent(float(b.t_event[0]) if code == BLOWN_UP else float(b.t[0]), point, diag)
    return FlowState(point, float(b.S[0]), b.jac[0], float(b.t[0]), "blown_up", event)


class Ray(NamedTuple):
    x: Array
    xi: Array
    S: float


@dataclass
class RayBatch:
    x0: Array
    x: Array
    xi: Array
    S: Array
    J: Array | None       # signed det of d x_hat / d x0; |J| is the ray Jacobian
    t: Array
    status: Array
    t_event: Array

    @property
    def ok(self) -> Array:
        return self.status == OK

    def status_text(self, b: int) -> str:
        code = int(self.status[b])
        if code == BLOWN_UP:
            return f"blown_up({self.t_event[b]:.17g})"
        return STATUS_NAMES[code]


def ray_determinant(jac: Array, hess_S: Array) -> Array:
    """Signed det(Phi_xx + Phi_xxi . D2 S_I) from flow Jacobians of shape (..., 2d, 2d)."""
    d = hess_S.shape[-1]
    return np.linalg.det(jac[..., :d, :d] + jac[..., :d, d:] @ hess_S)


def rays(
    H: HamiltonianSymbol,
    initial: InitialData,
    x0: Array,
    t: float | Array,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    with_jacobian: bool = True,
) -> RayBatch:
    d = H.dim
    x0 = np.asarray(x0, dtype=float).reshape(-1, d)
    xi0 = np.asarray(initial.grad_S_I(x0), dtype=float).reshape(-1, d)
    S0 = np.asarray(initial.S_I(x0), dtype=float).reshape(-1)
    b = flow_batch(H, x0, xi0, t, S0=S0, rtol=rtol, atol=atol, with_jacobian=with_jacobian)
    J = ray_determinant(b.jac, initial.hessian(x0)) if with_jacobian else None
    return RayBatch(x0, b.x, b.xi, b.S, J, b.t, b.status, b.t_event)


def _single_ray(H, initial, x0, t, rtol, atol, with_jacobian) -> RayBatch:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (H.dim,):
        raise ValueError(f"x0 must have shape ({H.dim},)")
    rb = rays(H, initial, x0[None, :], float(t), rtol=rtol, atol=atol, with_jacobian=with_jacobian)
    code = int(rb.status[0])
    if code == NAN:
        raise SymbolNaNError(f"non-finite symbol value along the ray from x0 = {x0}")
    if code != OK:
        ev = BlowupEvent(float(rb.t_event[0]), PhasePoint(rb.x[0], rb.xi[0]), "ray left every bounded set")
        raise FlowBlowupError(ev)
    return rb


def ray(
    H: HamiltonianSymbol,
    initial: InitialData,
    x0: Array,
    t: float,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> Ray:
    """Position, momentum and phase carried along the ray from ``x0``."""
    rb = _single_ray(H, initial, x0, t, rtol, atol, with_jacobian=False)
    return Ray(rb.x[0], rb.xi[0], float(rb.S[0]))


def ray_jacobian(
    H: HamiltonianSymbol,
    initial: InitialData,
    x0: Array,
    t: float,
    *,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> float:
    """|det d x_hat(t, x0) / d x0| through the variational flow."""
    rb = _single_ray(H, initial, x0, t, rtol, atol, with_jacobian=True)
    return float(abs(rb.J[0]))


def stormer_verlet(H: HamiltonianSymbol, x0: Array, xi0: Array, t: float, n_steps: int) -> tuple[Array, Array]:
    """Fixed-step symplectic leapfrog for separable H = omega(xi) + V(x)."""
    if not H.separable:
        raise ValueError("Stormer-Verlet needs a separable symbol")
    x = np.array(x0, dtype=float, ndmin=2)
    p = np.array(xi0, dtype=float, ndmin=2)
    dt = float(t) / n_steps
    for _ in range(n_steps):
        p = p - 0.5 * dt * H.grad_x(x, p)
        x = x + dt * H.grad_xi(x, p)
        p = p - 0.5 * dt * H.grad_x(x, p)
    return x, p
