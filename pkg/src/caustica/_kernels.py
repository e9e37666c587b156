"""Hot inner loops.

Every kernel exists twice: a ``*_numba`` loop version compiled with
``@njit`` and a ``*_numpy`` vectorised version.  The public name is bound to
one of them at import time according to :data:`caustica._accel.USE_NUMBA`.
Both variants are kept importable so tests and the benchmark can compare
them directly.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = ["combine_stages", "dop853_error_norm", "variational_rate", "wigner_lags", "sign_change_mask"]


# --------------------------------------------------------------------------
# Runge-Kutta stage combination: out = y + h * sum_j coef[j] * K[j]
# --------------------------------------------------------------------------


def combine_stages_numpy(y, K, coef, h):
    s = coef.shape[0]
    acc = np.tensordot(coef, K[:s], axes=1)
    return y + h[:, None] * acc


@njit
def combine_stages_numba(y, K, coef, h):
    s = coef.shape[0]
    nb, n = y.shape
    acc = np.zeros_like(y)
    # stage-major order streams each K[j] contiguously
    for j in range(s):
        c = coef[j]
        if c != 0.0:
            for b in range(nb):
                for i in range(n):
                    acc[b, i] += c * K[j, b, i]
    out = np.empty_like(y)
    for b in range(nb):
        hb = h[b]
        for i in range(n):
            out[b, i] = y[b, i] + hb * acc[b, i]
    return out


# --------------------------------------------------------------------------
# DOP853 embedded error estimate (5th/3rd order blend, Hairer's formula)
# --------------------------------------------------------------------------


def dop853_error_norm_numpy(K, E5, E3, h, scale):
    n = K.shape[2]
    err5 = np.tensordot(E5, K, axes=1) / scale
    err3 = np.tensordot(E3, K, axes=1) / scale
    e5 = np.sum(err5 * err5, axis=1)
    e3 = np.sum(err3 * err3, axis=1)
    denom = e5 + 0.01 * e3
    out = np.zeros_like(h)
    nz = denom > 0.0
    out[nz] = np.abs(h[nz]) * e5[nz] / np.sqrt(denom[nz] * n)
    return out


@njit
def dop853_error_norm_numba(K, E5, E3, h, scale):
    s, nb, n = K.shape
    out = np.zeros(nb)
    for b in range(nb):
        e5 = 0.0
        e3 = 0.0
        for i in range(n):
            a5 = 0.0
            a3 = 0.0
            for j in range(s):
                a5 += E5[j] * K[j, b, i]
                a3 += E3[j] * K[j, b, i]
            a5 /= scale[b, i]
            a3 /= scale[b, i]
            e5 += a5 * a5
            e3 += a3 * a3
        denom = e5 + 0.01 * e3
        if denom > 0.0:
            out[b] = abs(h[b]) * e5 / np.sqrt(denom * n)
    return out


# --------------------------------------------------------------------------
# Linearised Hamiltonian field applied to the variational matrix:
#   dJ = [[M^T, Hpp], [-Hxx, -M]] @ J,   M[i, j] = d2H / dx_i dxi_j
# --------------------------------------------------------------------------


def variational_rate_numpy(hxx, hmix, hpp, J):
    d = hxx.shape[-1]
    top = np.swapaxes(hmix, -1, -2) @ J[:, :d, :] + hpp @ J[:, d:, :]
    bot = -(hxx @ J[:, :d, :]) - hmix @ J[:, d:, :]
    return np.concatenate((top, bot), axis=1)


@njit
def variational_rate_numba(hxx, hmix, hpp, J):
    nb, d, _ = hxx.shape
    n2 = 2 * d
    out = np.zeros((nb, n2, n2))
    for b in range(nb):
        for i in range(d):
            for c in range(n2):
                top = 0.0
                bot = 0.0
                for k in range(d):
                    jx = J[b, k, c]
                    jp = J[b, d + k, c]
                    top += hmix[b, k, i] * jx + hpp[b, i, k] * jp
                    bot -= hxx[b, i, k] * jx + hmix[b, i, k] * jp
                out[b, i, c] = top
                out[b, d + i, c] = bot
    return out


# --------------------------------------------------------------------------
# Wigner lag products  L[r, m] = psi[j_r - m] * conj(psi[j_r + m]),
# zero when either index leaves the grid (no periodic wrap; a wrap would pair
# each node with its antipode and create a ghost copy of every bump).
# Columns in FFT order (m = 0, 1, ..., N/2-1, -N/2, ..., -1).
# --------------------------------------------------------------------------


def wigner_lags_numpy(psi, rows):
    n = psi.shape[0]
    m = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
    j = rows[:, None]
    a = j - m[None, :]
    b = j + m[None, :]
    ok = (a >= 0) & (a < n) & (b >= 0) & (b < n)
    out = psi[np.clip(a, 0, n - 1)] * np.conj(psi[np.clip(b, 0, n - 1)])
    return np.where(ok, out, 0.0)


@njit
def wigner_lags_numba(psi, rows):
    n = psi.shape[0]
    nr = rows.shape[0]
    half = n // 2
    out = np.zeros((nr, n), dtype=np.complex128)
    for r in range(nr):
        j = rows[r]
        for c in range(n):
            m = c if c < half else c - n
            a = j - m
            b = j + m
            if a >= 0 and a < n and b >= 0 and b < n:
                out[r, c] = psi[a] * np.conj(psi[b])
    return out


# --------------------------------------------------------------------------
# Sign changes between consecutive samples along the last axis.
# A sample that is exactly zero counts as a change with both neighbours.
# --------------------------------------------------------------------------


def sign_change_mask_numpy(f):
    a = f[:, :-1]
    b = f[:, 1:]
    return (a * b < 0.0) | (a == 0.0)


@njit
def sign_change_mask_numba(f):
    nb, g = f.shape
    out = np.zeros((nb, g - 1), dtype=np.bool_)
    for b in range(nb):
        for i in range(g - 1):
            a = f[b, i]
            c = f[b, i + 1]
            out[b, i] = (a * c < 0.0) or (a == 0.0)
    return out


if USE_NUMBA:
    combine_stages = combine_stages_numba
    dop853_error_norm = dop853_error_norm_numba
    variational_rate = variational_rate_numba
    wigner_lags = wigner_lags_numba
    sign_change_mask = sign_change_mask_numba
else:
    combine_stages = combine_stages_numpy
    dop853_error_norm = dop853_error_norm_numpy
    variational_rate = variational_rate_numpy
    wigner_lags = wigner_lags_numpy
    sign_change_mask = sign_change_mask_numpy
