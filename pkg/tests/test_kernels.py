"""The numba and numpy variants of every kernel must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caustica import _kernels as k
from caustica._accel import NUMBA_AVAILABLE
from caustica._dop853 import E3, E5, N_STAGES

pytestmark = pytest.mark.skipif(not NUMBA_AVAILABLE, reason="numba not installed")

sizes = st.tuples(st.integers(1, 12), st.integers(1, 6))
seeds = st.integers(0, 2**32 - 1)


@given(sizes, seeds)
def test_combine_stages(shape, seed):
    rng = np.random.default_rng(seed)
    nb, n = shape
    K = rng.normal(size=(N_STAGES + 1, nb, n))
    y = rng.normal(size=(nb, n))
    h = rng.uniform(-1, 1, nb)
    coef = rng.normal(size=7)
    coef[2] = 0.0
    a = k.combine_stages_numpy(y, K, coef, h)
    b = k.combine_stages_numba(y, K, coef, h)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13)


@given(sizes, seeds)
def test_dop853_error_norm(shape, seed):
    rng = np.random.default_rng(seed)
    nb, n = shape
    K = rng.normal(size=(N_STAGES + 1, nb, n))
    h = rng.uniform(-1, 1, nb)
    scale = rng.uniform(0.1, 2.0, size=(nb, n))
    a = k.dop853_error_norm_numpy(K, E5, E3, h, scale)
    b = k.dop853_error_norm_numba(K, E5, E3, h, scale)
    assert np.allclose(a, b, rtol=1e-12, atol=0)


@given(st.integers(1, 8), st.integers(1, 3), seeds)
def test_variational_rate(nb, d, seed):
    rng = np.random.default_rng(seed)
    hxx, hmix, hpp = (rng.normal(size=(nb, d, d)) for _ in range(3))
    J = rng.normal(size=(nb, 2 * d, 2 * d))
    assert np.allclose(k.variational_rate_numpy(hxx, hmix, hpp, J), k.variational_rate_numba(hxx, hmix, hpp, J), rtol=1e-13, atol=1e-13)


@given(st.sampled_from([4, 8, 16, 64]), seeds)
def test_wigner_lags(n, seed):
    rng = np.random.default_rng(seed)
    psi = rng.normal(size=n) + 1j * rng.normal(size=n)
    rows = rng.integers(0, n, size=5)
    a = k.wigner_lags_numpy(psi, rows)
    b = k.wigner_lags_numba(psi, rows)
    assert np.allclose(a, b, rtol=1e-14, atol=1e-14)
    assert np.array_equal(a == 0, b == 0)


def test_wigner_lags_drop_out_of_range_pairs():
    psi = np.arange(1, 9, dtype=complex)
    L = k.wigner_lags_numpy(psi, np.array([0, 3, 7]))
    assert L[0, 0] == 1 and L[0, 1] == 0 and L[0, -1] == 0
    assert L[1, 1] == 3 * 5 and L[1, -1] == 5 * 3 and L[1, 3] == 1 * 7 and L[1, 4] == 0
    assert L[2, 0] == 64 and L[2, 1] == 0


@given(st.integers(1, 6), st.integers(2, 20), seeds)
def test_sign_change_mask(nb, g, seed):
    rng = np.random.default_rng(seed)
    f = rng.integers(-2, 3, size=(nb, g)).astype(float)
    assert np.array_equal(k.sign_change_mask_numpy(f), k.sign_change_mask_numba(f))


def test_environment_flag_selects_numpy_backend():
    code = "import caustica, caustica._kernels as k; print(caustica.backend(), k.combine_stages is k.combine_stages_numpy)"
    env = dict(os.environ, CAUSTICA_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numpy", "True"]
    env["CAUSTICA_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numba", "False"]


def test_backends_give_the_same_branches():
    code = (
        "import numpy as np, caustica as c; s = c.preset('ex_1_3_cusp_lipschitz');"
        "bs = c.find_branches(s.hamiltonian, s.initial, 1.5, 2.0, s.xi_box, s.tolerances);"
        "print(' '.join(repr(float(b.v[0])) + ':' + repr(b.n) for b in bs.branches))"
    )
    outs = []
    for flag in ("1", "0"):
        env = dict(os.environ, CAUSTICA_DISABLE_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split())
    for a, b in zip(*outs):
        va, na = map(float, a.split(":"))
        vb, nb = map(float, b.split(":"))
        assert abs(va - vb) <= 1e-12 and abs(na - nb) <= 1e-12
    assert len(outs[0]) == len(outs[1]) == 3
