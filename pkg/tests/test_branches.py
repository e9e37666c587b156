import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caustica import (
    PRESET_NAMES,
    CausticError,
    caustic_scan,
    concentration,
    density,
    density_batch,
    f_xt,
    find_branches,
    find_branches_batch,
    integrate_density,
    preset,
    ray_jacobian,
    wkb_superposition,
)
from caustica.branches import wkb_superposition_batch
from oracles import defect, gauss_mass, harmonic_closed_form, n_gauss, scan_roots

SC = {name: preset(name) for name in PRESET_NAMES}


def branches(name, x, t):
    s = SC[name]
    return find_branches(s.hamiltonian, s.initial, x, t, s.xi_box, s.tolerances)


# defect map


@given(st.floats(-3, 3), st.floats(0, 3), st.floats(-3, 3))
def test_defect_free_rarefaction(x, t, xi):
    s = SC["ex_1_1_rarefaction"]
    dv = f_xt(s.hamiltonian, s.initial, [x], t, [xi])
    assert dv.f[0] == pytest.approx(xi * (1 + t) - x, abs=1e-9)
    assert dv.det == pytest.approx(1 + t, abs=1e-9)


@pytest.mark.parametrize("name", ["ex_1_3_cusp_smooth", "harmonic_k", "appendix1_airy_k"])
def test_defect_at_time_zero(name):
    s = SC[name]
    for x, xi in [(0.3, -0.2), (-1.1, 0.8)]:
        dv = f_xt(s.hamiltonian, s.initial, [x], 0.0, [xi])
        assert dv.f[0] == pytest.approx(xi - s.initial.grad_S_I(np.array([x]))[0], abs=1e-14)


@given(st.floats(-3, 3), st.floats(0.05, 1.4))
def test_defect_harmonic_vanishes_at_closed_form(x, t):
    s = SC["harmonic_k"]
    v = (1 - x * math.sin(t)) / math.cos(t)
    assert abs(f_xt(s.hamiltonian, s.initial, [x], t, [v]).f[0]) <= 1e-8


@pytest.mark.parametrize("name", ["ex_1_3_cusp_smooth", "harmonic_k", "appendix1_airy_k"])
def test_defect_jacobian_matches_finite_differences(name):
    s = SC[name]
    x, t, h = 0.4, 0.35, 1e-6
    for xi in (-0.3, 0.7, 1.2):
        dv = f_xt(s.hamiltonian, s.initial, [x], t, [xi])
        fp = f_xt(s.hamiltonian, s.initial, [x], t, [xi + h]).f[0]
        fm = f_xt(s.hamiltonian, s.initial, [x], t, [xi - h]).f[0]
        assert dv.det == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-8)


# branch enumeration


def test_triple_valued_cusp_point():
    bs = branches("ex_1_3_cusp_lipschitz", 1.5, 2.0)
    assert bs.N == 3 and bs.complete
    assert np.allclose(bs.velocities[:, 0], [0.0, 0.5, 1.0], atol=1e-8)


def test_rarefaction_single_branch():
    bs = branches("ex_1_1_rarefaction", 1.0, 1.0)
    assert bs.N == 1
    b = bs.branches[0]
    assert b.v[0] == pytest.approx(0.5, abs=1e-10)
    assert b.S == pytest.approx(0.25, abs=1e-10)
    assert b.Df == pytest.approx(2.0, abs=1e-10)
    assert b.n == pytest.approx(n_gauss(0.5) / 2, abs=1e-12)


@pytest.mark.parametrize("name", [n for n in PRESET_NAMES])
@pytest.mark.parametrize("x", [-0.7, 0.2, 1.3])
def test_time_zero_recovers_initial_data(name, x):
    s = SC[name]
    bs = branches(name, x, 0.0)
    X = np.array([x])
    assert bs.N == 1
    b = bs.branches[0]
    assert b.v[0] == pytest.approx(s.initial.grad_S_I(X)[0], abs=1e-10)
    assert b.S == pytest.approx(float(s.initial.S_I(X)), abs=1e-12)
    assert b.n == pytest.approx(float(s.initial.n_I(X)), rel=1e-12)
    assert b.Df == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_roots_match_grid_scan_oracle(name):
    s = SC[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    t0, t1 = s.t_range
    xs = rng.uniform(s.region.lo[0] / 3, s.region.hi[0] / 3, 12)
    ts = rng.uniform(t0, t1, 12)
    sets = find_branches_batch(s.hamiltonian, s.initial, xs[:, None], ts, s.xi_box, s.tolerances)
    for x, t, bs in zip(xs, ts, sets):
        ref = scan_roots(lambda xi: defect(name, x, t, xi), s.xi_box.lo[0], s.xi_box.hi[0])
        got = bs.velocities[:, 0]
        assert len(got) == len(ref), (x, t, got, ref)
        assert np.allclose(got, ref, atol=1e-5)


@pytest.mark.parametrize("name", ["ex_1_3_cusp_smooth", "ex_1_3_cusp_lipschitz", "harmonic_k"])
def test_branch_invariants(name):
    s = SC[name]
    rng = np.random.default_rng(1)
    xs = rng.uniform(-2.5, 2.5, 40)
    ts = rng.uniform(0.1, s.t_range[1], 40)
    for bs in find_branches_batch(s.hamiltonian, s.initial, xs[:, None], ts, s.xi_box, s.tolerances):
        v = bs.velocities[:, 0]
        assert np.all(np.diff(v) > 1e-6 * (1 + np.abs(v[1:])))
        for b in bs.branches:
            assert b.residual <= 1e3 * s.tolerances.root
            if not b.at_caustic:
                nI = float(s.initial.n_I(b.z))
                assert b.n * abs(b.Df) == pytest.approx(nI, rel=1e-6, abs=1e-300)


@pytest.mark.parametrize("name", ["ex_1_3_cusp_smooth", "ex_1_3_cusp_lipschitz"])
def test_branch_count_is_odd_away_from_caustics(name):
    s = SC[name]
    rng = np.random.default_rng(4)
    xs = rng.uniform(-3, 3, 80)
    ts = rng.uniform(0.0, 2.0, 80)
    for bs in find_branches_batch(s.hamiltonian, s.initial, xs[:, None], ts, s.xi_box, s.tolerances):
        if not bs.at_caustic:
            assert bs.N % 2 == 1, (bs.x, bs.t, bs.velocities)


def test_search_box_confines_roots():
    s = SC["ex_1_1_rarefaction"]
    from caustica import Box

    narrow = Box((-0.4,), (0.2,))
    bs = find_branches(s.hamiltonian, s.initial, 1.0, 1.0, narrow, s.tolerances)
    assert bs.N == 0


# densities


def test_density_rarefaction_value():
    s = SC["ex_1_1_rarefaction"]
    d = density(s.hamiltonian, s.initial, 1.0, 1.0, s.xi_box, s.tolerances)
    assert d.n == pytest.approx(math.exp(-0.25) / (2 * math.sqrt(math.pi)), abs=1e-12)
    assert d.n == pytest.approx(0.21970, abs=1e-5)


def test_density_inside_cusp_three_terms():
    s = SC["ex_1_3_cusp_lipschitz"]
    x, t = 1.5, 2.0
    d = density(s.hamiltonian, s.initial, x, t, s.xi_box, s.tolerances)
    expected = n_gauss(x - t) + n_gauss((x - t) / (1 - t)) / abs(t - 1) + n_gauss(x)
    assert d.n == pytest.approx(expected, abs=1e-10)
    assert len(d.terms) == 3


@given(st.floats(-3, 3))
def test_density_harmonic_quarter_period(x):
    s = SC["harmonic_k"]
    t = math.pi / 4
    d = density(s.hamiltonian, s.initial, x, t, s.xi_box, s.tolerances)
    assert d.n == pytest.approx(n_gauss((x - math.sqrt(2) / 2) * math.sqrt(2)) * math.sqrt(2), abs=1e-6)


def test_density_at_caustic_raises():
    s = SC["ex_1_2_focus"]
    with pytest.raises(CausticError):
        density(s.hamiltonian, s.initial, 0.0, 1.0, s.xi_box, s.tolerances)


@pytest.mark.parametrize("name, t", [("ex_1_1_rarefaction", 1.5), ("harmonic_k", 1.0), ("ex_1_3_cusp_smooth", 0.6), ("appendix1_airy_k", 0.3)])
def test_precaustic_density_equals_ray_jacobian_form(name, t):
    s = SC[name]
    for x in np.linspace(-2, 2, 9):
        bs = branches(name, x, t)
        assert bs.N == 1
        b = bs.branches[0]
        J = ray_jacobian(s.hamiltonian, s.initial, b.z, t)
        assert b.n == pytest.approx(float(s.initial.n_I(b.z)) / J, abs=1e-8)


@pytest.mark.parametrize("name, t", [("ex_1_1_rarefaction", 2.0), ("harmonic_k", math.pi / 8), ("ex_1_3_cusp_smooth", 0.7), ("appendix1_airy_k", 0.25)])
def test_phase_gradient_equals_velocity(name, t):
    s = SC[name]
    h = 1e-4
    xs = np.linspace(-1.5, 1.5, 7)
    pts = np.concatenate([xs - h, xs, xs + h])[:, None]
    sets = find_branches_batch(s.hamiltonian, s.initial, pts, t, s.xi_box, s.tolerances)
    S = np.array([bs.branches[0].S for bs in sets]).reshape(3, -1)
    v = np.array([bs.branches[0].v[0] for bs in sets]).reshape(3, -1)[1]
    assert np.allclose((S[2] - S[0]) / (2 * h), v, atol=1e-4)


def test_harmonic_closed_forms():
    s = SC["harmonic_k"]
    xs = np.linspace(-2, 2, 9)
    for t in (math.pi / 8, math.pi / 4):
        db = density_batch(s.hamiltonian, s.initial, xs[:, None], t, s.xi_box, s.tolerances)
        v, S, n = harmonic_closed_form(xs, t)
        assert np.allclose(db.n, n, atol=1e-6)
        sets = find_branches_batch(s.hamiltonian, s.initial, xs[:, None], t, s.xi_box, s.tolerances)
        assert np.allclose([b.branches[0].v[0] for b in sets], v, atol=1e-6)
        assert np.allclose([b.branches[0].S for b in sets], S, atol=1e-6)


# caustics and concentration


def test_focus_scan_single_point():
    s = SC["ex_1_2_focus"]
    cs = caustic_scan(s.hamiltonian, s.initial, s.region, s.t_range, tol=s.tolerances)
    assert len(cs.points) == 1
    p = cs.points[0]
    assert abs(p.x[0]) <= 1e-6 and abs(p.t - 1) <= 1e-6


def test_rarefaction_has_no_caustic():
    s = SC["ex_1_1_rarefaction"]
    assert caustic_scan(s.hamiltonian, s.initial, s.region, (0.0, 3.0), tol=s.tolerances).points == []


def test_lipschitz_cusp_structure():
    s = SC["ex_1_3_cusp_lipschitz"]
    cs = caustic_scan(s.hamiltonian, s.initial, s.region, s.t_range, tol=s.tolerances)
    jz = [p for p in cs.points if p.kind == "jacobian_zero"]
    assert len(jz) == 1 and abs(jz[0].x[0] - 1) <= 1e-6 and abs(jz[0].t - 1) <= 1e-6
    edges = [p for p in cs.points if p.kind == "kink_edge" and p.t > 1 + 1e-9]
    assert edges
    for p in edges:
        x, t = p.x[0], p.t
        assert min(abs(x - 1), abs(x - t)) <= 1e-6


def test_smooth_cusp_starts_at_origin():
    s = SC["ex_1_3_cusp_smooth"]
    cs = caustic_scan(s.hamiltonian, s.initial, s.region, s.t_range, tol=s.tolerances)
    first = min(cs.points, key=lambda p: p.t)
    assert abs(first.t - 1) <= 1e-6 and abs(first.x[0]) <= 1e-6


def test_concentration_examples():
    s = SC["ex_1_2_focus"]
    c = concentration(s.hamiltonian, s.initial, 0.0, 1.0, s.footpoint_box, s.tolerances)
    assert c.classification == "hot" and c.mu == pytest.approx(gauss_mass(-12, 12), abs=1e-6)
    s = SC["ex_1_3_cusp_lipschitz"]
    c = concentration(s.hamiltonian, s.initial, 1.0, 1.0, s.footpoint_box, s.tolerances)
    assert c.classification == "hot" and c.mu == pytest.approx(gauss_mass(0, 1), abs=1e-6)
    assert c.mu == pytest.approx(0.42135, abs=1e-5)
    assert len(c.preimage) == 1 and np.allclose(c.preimage[0], (0.0, 1.0), atol=1e-6)
    s = SC["ex_1_3_cusp_smooth"]
    c = concentration(s.hamiltonian, s.initial, 0.0, 1.0, s.footpoint_box, s.tolerances)
    assert c.classification == "cool" and c.mu <= 1e-8


def test_regular_point_is_cool():
    s = SC["ex_1_1_rarefaction"]
    c = concentration(s.hamiltonian, s.initial, 0.5, 1.0, s.footpoint_box, s.tolerances)
    assert c.mu == 0.0 and c.classification == "cool"
    assert len(c.isolated) == 1 and c.isolated[0] == pytest.approx(0.25, abs=1e-12)


def test_mass_balance_rarefaction():
    mb = integrate_density(SC["ex_1_1_rarefaction"], 1.0)
    assert abs(mb.defect) <= 1e-6 and not mb.concentrated


# WKB superposition


def test_wkb_rarefaction():
    s = SC["ex_1_1_rarefaction"]
    w = wkb_superposition(s.hamiltonian, s.initial, 1.0, 1.0, 0.1, s.xi_box, s.tolerances)
    assert w.maslov_shifts_omitted
    assert w.value == pytest.approx(math.sqrt(n_gauss(0.5) / 2) * np.exp(1j * 0.25 / 0.1), abs=1e-10)


@pytest.mark.parametrize("name", ["ex_1_3_cusp_smooth", "harmonic_k"])
def test_wkb_at_time_zero(name):
    s = SC[name]
    eps = 1 / 32
    xs = np.linspace(-2, 2, 11)
    vals, cz = wkb_superposition_batch(s.hamiltonian, s.initial, xs[:, None], 0.0, eps, s.xi_box, s.tolerances)
    X = xs[:, None]
    expect = np.sqrt(s.initial.n_I(X)) * np.exp(1j * s.initial.S_I(X) / eps)
    assert not cz.any() and np.allclose(vals, expect, atol=1e-12)


def test_wkb_at_caustic_raises():
    s = SC["ex_1_2_focus"]
    with pytest.raises(CausticError):
        wkb_superposition(s.hamiltonian, s.initial, 0.0, 1.0, 0.1, s.xi_box, s.tolerances)
