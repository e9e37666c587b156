"""Batched adaptive DOP853 integration of autonomous ODE systems.

Every row of the state array is an independent trajectory with its own
target time, step size and accept/reject history.  Blow-up is declared when
the phase-space norm of a row exceeds ``norm_limit`` or its step size
collapses; the event time is then bracketed by bisection inside the last
successful step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _dop853 as tab
from ._kernels import combine_stages, dop853_error_norm

OK, BLOWN_UP, NAN, MAX_STEPS = 0, 1, 2, 3
STATUS_NAMES = {OK: "ok", BLOWN_UP: "blown_up", NAN: "nan", MAX_STEPS: "max_steps"}

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
ERR_EXP = -1.0 / 8.0
_RUNNING = -1
_A_ROWS = [np.ascontiguousarray(tab.A[s, :s]) for s in range(tab.N_STAGES)]


@dataclass
class BatchResult:
    y: np.ndarray          # (B, n) final state (last good state when status != OK)
    t: np.ndarray          # (B,) time reached
    status: np.ndarray     # (B,) int codes, see STATUS_NAMES
    t_event: np.ndarray    # (B,) bracketed blow-up time, nan when not blown up
    n_steps: np.ndarray    # (B,) accepted steps

    @property
    def ok(self) -> np.ndarray:
        return self.status == OK


def _rms(a, scale):
    return np.sqrt(np.mean((a / scale) ** 2, axis=1))


def _initial_step(rhs, y, f, direction, span, rtol, atol):
    scale = atol + np.abs(y) * rtol
    d0 = _rms(y, scale)
    d1 = _rms(f, scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, span)
    y1 = y + (h0 * direction)[:, None] * f
    f1 = rhs(y1)
    d2 = _rms(f1 - f, scale) / np.maximum(h0, 1e-300)
    d2 = np.where(np.isfinite(d2), d2, np.inf)
    big = np.maximum(d1, d2)
    h1 = np.where(big <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(big, 1e-300)) ** (1.0 / 8.0))
    return np.minimum(np.minimum(100.0 * h0, h1), span)


def _single_step(rhs, y, f, h):
    """One DOP853 step for every row; returns (y_new, f_new, K)."""
    nb, n = y.shape
    K = np.empty((tab.N_STAGES + 1, nb, n))
    K[0] = f
    for s in range(1, tab.N_STAGES):
        ys = combine_stages(y, K, _A_ROWS[s], h)
        K[s] = rhs(ys)
    y_new = combine_stages(y, K, tab.B, h)
    with np.errstate(all="ignore"):
        f_new = rhs(y_new)
    K[tab.N_STAGES] = f_new
    return y_new, f_new, K


def integrate_batch(
    rhs: Callable[[np.ndarray], np.ndarray],
    y0: np.ndarray,
    t_end,
    *,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    norm_dim: int | None = None,
    norm_limit: float = 1e8,
    max_steps: int = 200_000,
    bracket_tol: float = 1e-7,
) -> BatchResult:
    """Integrate ``y' = rhs(y)`` from t=0 to ``t_end`` (scalar or per row).

    ``rhs`` maps an (M, n) array to an (M, n) array and must be row-wise
    independent.  ``norm_dim`` limits the blow-up norm to the leading
    components (the phase-space part of an augmented state).
    """
    y0 = np.array(y0, dtype=float, ndmin=2)
    nb, n = y0.shape
    t_end = np.broadcast_to(np.asarray(t_end, dtype=float), (nb,)).copy()
    nd = n if norm_dim is None else norm_dim

    y = y0.copy()
    t = np.zeros(nb)
    status = np.full(nb, _RUNNING, dtype=np.int8)
    t_event = np.full(nb, np.nan)
    n_steps = np.zeros(nb, dtype=np.int64)

    done = t_end == 0.0
    status[done] = OK
    bad0 = ~np.all(np.isfinite(y0), axis=1) & ~done
    status[bad0] = NAN
    direction = np.sign(t_end)

    act = np.flatnonzero(status == _RUNNING)
    if act.size == 0:
        return BatchResult(y, t, status, t_event, n_steps)

    with np.errstate(all="ignore"):
        f = np.empty_like(y)
        f[act] = rhs(y[act])
    badf = act[~np.all(np.isfinite(f[act]), axis=1)]
    status[badf] = NAN
    act = np.flatnonzero(status == _RUNNING)
    h_abs = np.zeros(nb)
    if act.size:
        h_abs[act] = _initial_step(rhs, y[act], f[act], direction[act], np.abs(t_end[act]), rtol, atol)
    saw_nan_rhs = np.zeros(nb, dtype=bool)

    while act.size:
        ya, fa, ta = y[act], f[act], t[act]
        da = direction[act]
        remaining = np.abs(t_end[act] - ta)
        min_step = 1e-14 * (1.0 + np.abs(ta))
        ha = np.minimum(h_abs[act], remaining)

        collapsed = (h_abs[act] < min_step) & (remaining > min_step)
        if np.any(collapsed):
            idx = act[collapsed]
            status[idx] = np.where(saw_nan_rhs[idx], NAN, BLOWN_UP)
            t_event[idx] = t[idx]
            keep = ~collapsed
            act, ya, fa, ta, da, remaining, ha = act[keep], ya[keep], fa[keep], ta[keep], da[keep], remaining[keep], ha[keep]
            if act.size == 0:
                break

        hs = ha * da
        with np.errstate(all="ignore"):
            y_new, f_new, K = _single_step(rhs, ya, fa, hs)
            scale = atol + np.maximum(np.abs(ya), np.abs(y_new)) * rtol
            err = dop853_error_norm(K, tab.E5, tab.E3, hs, scale)
        finite_y = np.all(np.isfinite(y_new), axis=1)
        finite_f = np.all(np.isfinite(f_new), axis=1)
        saw_nan_rhs[act[finite_y & ~finite_f]] = True
        err = np.where(finite_y & finite_f & np.isfinite(err), err, np.inf)
        accept = err <= 1.0

        with np.errstate(divide="ignore"):
            fac_acc = np.where(err == 0.0, MAX_FACTOR, np.minimum(MAX_FACTOR, SAFETY * err**ERR_EXP))
            fac_rej = np.where(np.isfinite(err), np.maximum(MIN_FACTOR, SAFETY * err**ERR_EXP), MIN_FACTOR)
        h_abs[act] = np.where(accept, ha * fac_acc, ha * fac_rej)

        acc = act[accept]
        if acc.size:
            yn = y_new[accept]
            norms = np.linalg.norm(yn[:, :nd], axis=1)
            blew = norms > norm_limit
            good = acc[~blew]
            y[good] = yn[~blew]
            f[good] = f_new[accept][~blew]
            t[good] = ta[accept][~blew] + hs[accept][~blew]
            n_steps[good] += 1
            finished = good[np.abs(t_end[good] - t[good]) <= 1e-15 * (1.0 + np.abs(t_end[good]))]
            t[finished] = t_end[finished]
            status[finished] = OK
            if np.any(blew):
                bidx = acc[blew]
                t_event[bidx] = _bracket_norm_crossing(
                    rhs, ya[accept][blew], fa[accept][blew], ta[accept][blew], hs[accept][blew], nd, norm_limit, bracket_tol
                )
                status[bidx] = BLOWN_UP
        over = act[n_steps[act] >= max_steps]
        status[over[status[over] == _RUNNING]] = MAX_STEPS
        act = np.flatnonzero(status == _RUNNING)

    return BatchResult(y, t, status, t_event, n_steps)


def _bracket_norm_crossing(rhs, y, f, t, h, nd, limit, tol):
    """Bisect single-step sub-lengths of the last good step for the norm crossing."""
    lo = np.zeros(len(t))
    hi = np.ones(len(t))
    width = np.abs(h)
    while np.any((hi - lo) * width > tol):
        mid = 0.5 * (lo + hi)
        with np.errstate(all="ignore"):
            ym, _, _ = _single_step(rhs, y, f, h * mid)
        norm = np.linalg.norm(ym[:, :nd], axis=1)
        over = ~np.isfinite(norm) | (norm > limit)
        hi = np.where(over, mid, hi)
        lo = np.where(over, lo, mid)
    return t + h * 0.5 * (lo + hi)
