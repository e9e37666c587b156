import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caustica import (
    FlowBlowupError,
    InitialData,
    PhasePoint,
    SymbolNaNError,
    builtin_symbol,
    flow,
    flow_batch,
    preset,
    ray,
    ray_jacobian,
    rays,
    stormer_verlet,
    symbol_from_expression,
)
from oracles import airy_variable_flow, cubic_flow, free_flow, harmonic_flow

coord = st.floats(-3, 3, allow_nan=False)
times = st.floats(-4, 4, allow_nan=False)

FREE = builtin_symbol("free_quadratic")
HARM = builtin_symbol("harmonic_oscillator")
AIRY_VAR = builtin_symbol("airy_variable")


def P(x, xi):
    return PhasePoint([x], [xi])


@given(coord, coord, times)
def test_free_flow_closed_form(x, xi, t):
    s = flow(FREE, P(x, xi), t)
    ex, exi = free_flow(x, xi, t)
    assert s.ok
    assert s.point.x[0] == pytest.approx(ex, abs=1e-9)
    assert s.point.xi[0] == pytest.approx(exi, abs=1e-12)
    assert s.action == pytest.approx(0.5 * xi**2 * t, abs=1e-9 * (1 + abs(t) * xi**2))


@given(coord, coord, times)
def test_harmonic_flow_closed_form(x, xi, t):
    s = flow(HARM, P(x, xi), t)
    ex, exi = harmonic_flow(x, xi, t)
    assert abs(s.point.x[0] - ex) <= 1e-8
    assert abs(s.point.xi[0] - exi) <= 1e-8


@given(st.floats(-3, 3), st.floats(0.2, 2.0), st.floats(0.0, 0.95))
def test_airy_variable_flow_before_blowup(x, xi, frac):
    t = frac / (2 * xi**2)
    s = flow(AIRY_VAR, P(x, xi), t)
    ex, exi = airy_variable_flow(x, xi, t)
    assert s.ok
    assert s.point.x[0] == pytest.approx(ex, rel=1e-8, abs=1e-10)
    assert s.point.xi[0] == pytest.approx(exi, rel=1e-8)


@pytest.mark.parametrize("xi", [0.5, 1.0, 2.0])
def test_airy_variable_blowup_time(xi):
    t_c = 1 / (2 * xi**2)
    s = flow(AIRY_VAR, P(1.0, xi), 1.2 * t_c)
    assert s.status == "blown_up"
    assert abs(s.event.t_event - t_c) <= 1e-6
    assert s.status_text().startswith("blown_up(")


def test_airy_cubic_flow():
    H = builtin_symbol("airy_cubic")
    s = flow(H, P(0.3, -1.2), 2.5)
    ex, exi = cubic_flow(0.3, -1.2, 2.5)
    assert s.point.x[0] == pytest.approx(ex, abs=1e-10)
    assert s.point.xi[0] == pytest.approx(exi, abs=1e-12)


@pytest.mark.parametrize("name, params", [("harmonic_oscillator", {"d": 2}), ("airy_variable", {}), ("bethe_salpeter", {"potential": "x**2"})])
def test_zero_time_is_identity(name, params):
    H = builtin_symbol(name, params)
    d = H.dim
    p = PhasePoint(np.linspace(0.3, 0.9, d), np.linspace(-0.5, 0.4, d))
    s = flow(H, p, 0.0)
    assert np.array_equal(s.point.x, p.x) and np.array_equal(s.point.xi, p.xi)
    assert np.array_equal(s.jac, np.eye(2 * d))
    assert s.action == 0.0


def test_nan_symbol_is_reported():
    H = symbol_from_expression("xi**2/2 + sqrt(x)")
    with pytest.raises(SymbolNaNError):
        flow(H, P(-0.5, 1.0), 1.0)


def test_phase_point_validation():
    with pytest.raises(ValueError):
        PhasePoint([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        PhasePoint([np.inf], [0.0])


def test_flow_batch_mixed_times_and_status():
    x0 = np.array([[1.0], [1.0], [1.0]])
    xi0 = np.array([[1.0], [1.0], [2.0]])
    b = flow_batch(AIRY_VAR, x0, xi0, np.array([0.25, 0.6, -0.3]))
    assert b.status_text(0) == "ok" and b.status_text(1).startswith("blown_up")
    assert b.ok.tolist() == [True, False, True]


def test_flow_batch_is_row_independent():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-2, 2, size=(9, 1))
    xi0 = rng.uniform(-2, 2, size=(9, 1))
    full = flow_batch(HARM, x0, xi0, 2.7)
    for i in (0, 4, 8):
        one = flow_batch(HARM, x0[i : i + 1], xi0[i : i + 1], 2.7)
        assert np.array_equal(one.x[0], full.x[i]) and np.array_equal(one.jac[0], full.jac[i])


# rays


def test_ray_example_1_1():
    I = InitialData.from_expressions("exp(-x**2)", "x**2/2")
    r = ray(FREE, I, [1.0], 1.0)
    assert r.x[0] == pytest.approx(2.0, abs=1e-12)
    assert r.xi[0] == pytest.approx(1.0, abs=1e-12)
    assert r.S == pytest.approx(1.0, abs=1e-10)


def test_ray_harmonic_phase():
    I = InitialData.from_expressions("1", "x")
    t = math.pi / 4
    r = ray(HARM, I, [0.0], t)
    x = r.x[0]
    assert x == pytest.approx(math.sqrt(2) / 2, abs=1e-10)
    assert r.xi[0] == pytest.approx(math.sqrt(2) / 2, abs=1e-10)
    assert r.S == pytest.approx(-0.5 * (x**2 + 1) * math.tan(t) + x / math.cos(t), abs=1e-8)


def test_ray_at_zero_time_returns_initial_data():
    I = InitialData.from_expressions("1", "-ln(cosh(x))")
    r = ray(HARM, I, [0.7], 0.0)
    assert r.x[0] == 0.7
    assert r.xi[0] == pytest.approx(-math.tanh(0.7), abs=1e-15)
    assert r.S == pytest.approx(-math.log(math.cosh(0.7)), abs=1e-15)
    assert ray_jacobian(HARM, I, [0.7], 0.0) == 1.0


@given(st.floats(-5, 5), st.floats(0, 3))
def test_ray_jacobian_rarefaction(x0, t):
    I = InitialData.from_expressions("1", "x**2/2")
    assert ray_jacobian(FREE, I, [x0], t) == pytest.approx(1 + t, abs=1e-9)


def test_ray_jacobian_focus_vanishes():
    I = InitialData.from_expressions("1", "-x**2/2")
    for x0 in (-3.0, 0.2, 4.0):
        assert ray_jacobian(FREE, I, [x0], 1.0) <= 1e-9


@pytest.mark.parametrize("name", ["ex_1_3_cusp_smooth", "harmonic_k", "appendix1_airy_k"])
def test_ray_jacobian_matches_finite_differences(name):
    s = preset(name)
    H, I = s.hamiltonian, s.initial
    x0 = np.linspace(-1.7, 1.9, 7)
    t = 0.4
    h = 1e-5
    J = rays(H, I, x0[:, None], t).J
    fd = (rays(H, I, (x0 + h)[:, None], t, with_jacobian=False).x - rays(H, I, (x0 - h)[:, None], t, with_jacobian=False).x)[:, 0] / (2 * h)
    assert np.allclose(np.abs(J), np.abs(fd), rtol=1e-4, atol=1e-8)


def test_ray_blowup_raises():
    s = preset("appendix1_airy_k")
    with pytest.raises(FlowBlowupError) as info:
        ray(s.hamiltonian, s.initial, [1.0], 0.6)
    assert abs(info.value.event.t_event - 0.5) <= 1e-6


def test_ray_jacobian_two_dimensional():
    H = builtin_symbol("free_quadratic", d=2)
    I = InitialData.from_expressions("1", "(x1**2 + 2*x2**2)/2", dim=2)
    J = ray_jacobian(H, I, [0.3, -0.4], 0.5)
    assert J == pytest.approx((1 + 0.5) * (1 + 2 * 0.5), abs=1e-9)


# Hamiltonian invariants


GLOBAL = [
    ("free_quadratic", {"d": 2}),
    ("schrodinger_potential", {"potential": "cos(x)"}),
    ("harmonic_oscillator", {"d": 2}),
    ("bethe_salpeter", {"potential": "x**2/2"}),
    ("airy_cubic", {}),
]


@pytest.mark.parametrize("name, params", GLOBAL)
@given(data=st.data())
def test_energy_volume_group_reversibility(name, params, data):
    H = builtin_symbol(name, params)
    d = H.dim
    x = np.array(data.draw(st.lists(coord, min_size=d, max_size=d)))
    xi = np.array(data.draw(st.lists(coord, min_size=d, max_size=d)))
    t1, t2 = data.draw(times), data.draw(times)
    p = PhasePoint(x, xi)
    s1 = flow(H, p, t1)
    E0 = float(H.h(x, xi))
    assert abs(float(H.h(s1.point.x, s1.point.xi)) - E0) <= 1e-8 * (1 + abs(E0))
    assert abs(np.linalg.det(s1.jac) - 1) <= 1e-6
    s12 = flow(H, s1.point, t2)
    direct = flow(H, p, t1 + t2)
    assert np.max(np.abs(np.r_[s12.point.x - direct.point.x, s12.point.xi - direct.point.xi])) <= 1e-7
    back = flow(H, s1.point, -t1)
    assert np.max(np.abs(np.r_[back.point.x - x, back.point.xi - xi])) <= 1e-7


@given(coord, coord, st.floats(0.1, 3))
def test_action_additive_along_trajectory(x, xi, t):
    s1 = flow(HARM, P(x, xi), t / 2)
    s2 = flow(HARM, s1.point, t / 2)
    s = flow(HARM, P(x, xi), t)
    assert s1.action + s2.action == pytest.approx(s.action, abs=1e-8)


def test_stormer_verlet_agrees_with_adaptive_flow():
    H = builtin_symbol("schrodinger_potential", potential="cos(x)")
    x0, xi0 = np.array([0.4]), np.array([0.9])
    xs, ps = stormer_verlet(H, x0, xi0, 3.0, 6000)
    ref = flow(H, PhasePoint(x0, xi0), 3.0)
    assert np.allclose(xs.ravel(), ref.point.x, atol=1e-6)
    assert np.allclose(ps.ravel(), ref.point.xi, atol=1e-6)
    with pytest.raises(ValueError):
        stormer_verlet(AIRY_VAR, x0, xi0, 0.1, 10)
