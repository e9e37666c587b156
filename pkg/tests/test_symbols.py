import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caustica import (
    PRESET_NAMES,
    Box,
    InitialData,
    ScenarioError,
    Tolerances,
    builtin_symbol,
    dump_scenario,
    load_scenario,
    preset,
    preset_document,
    scenario_from_document,
    symbol_from_expression,
    validate_scenario,
)
from caustica.presets import preset_json
from caustica.symbols import dumps_document, gradient_consistency

finite = st.floats(-10, 10, allow_nan=False)

SYMBOLS = {
    "free_quadratic": {},
    "free_quadratic_2d": {"d": 2},
    "schrodinger_potential": {"potential": "cos(x) + x**2/4"},
    "schrodinger_potential_2d": {"d": 2, "potential": "x1*x2 + exp(-x1**2)"},
    "airy_cubic": {},
    "bethe_salpeter": {"potential": "1/(1 + x**2)"},
    "bethe_salpeter_2d": {"d": 2},
    "eikonal": {"coefficient": "2 + sin(x)"},
    "harmonic_oscillator": {},
    "harmonic_oscillator_3d": {"d": 3},
    "airy_variable": {},
}


def make(key):
    name = key.rsplit("_", 1)[0] if key[-2:] in ("2d", "3d") else key
    return builtin_symbol(name, SYMBOLS[key])


def test_harmonic_example():
    H = builtin_symbol("harmonic_oscillator")
    x, xi = np.array([1.0]), np.array([2.0])
    assert H.h(x, xi) == pytest.approx(2.5)
    assert H.grad_xi(x, xi)[0] == pytest.approx(2.0)
    assert H.grad_x(x, xi)[0] == pytest.approx(1.0)


def test_free_zero_point():
    H = builtin_symbol("free_quadratic")
    z = np.zeros(1)
    assert H.h(z, z) == 0.0
    assert np.all(H.grad_x(z, z) == 0.0)
    assert np.all(H.grad_xi(z, z) == 0.0)


def test_airy_variable_example():
    H = builtin_symbol("airy_variable")
    x, xi = np.array([2.0]), np.array([1.0])
    assert H.h(x, xi) == pytest.approx(-2.0)
    assert H.grad_xi(x, xi)[0] == pytest.approx(-6.0)
    assert H.grad_x(x, xi)[0] == pytest.approx(-1.0)


@pytest.mark.parametrize("key", sorted(SYMBOLS))
def test_gradients_match_central_differences(key):
    H = make(key)
    rng = np.random.default_rng(11)
    x = rng.uniform(-10, 10, size=(100, H.dim))
    xi = rng.uniform(-10, 10, size=(100, H.dim))
    if H.singular_at_zero:
        xi[np.linalg.norm(xi, axis=-1) < 0.1] += 1.0
    ex, ep = gradient_consistency(H, x, xi, step=1e-5)
    assert ex <= 1e-6 and ep <= 1e-6


@pytest.mark.parametrize("key", sorted(SYMBOLS))
def test_hessians_symmetric_and_consistent(key):
    H = make(key)
    rng = np.random.default_rng(5)
    x = rng.uniform(-3, 3, size=(40, H.dim))
    xi = rng.uniform(0.5, 3, size=(40, H.dim))
    hxx, hmix, hpp = H.second_derivatives(x, xi)
    assert np.max(np.abs(hpp - np.swapaxes(hpp, -1, -2))) <= 1e-12
    step = 1e-6
    for j in range(H.dim):
        e = np.zeros(H.dim)
        e[j] = step
        col = (H.grad_xi(x, xi + e) - H.grad_xi(x, xi - e)) / (2 * step)
        assert np.allclose(hpp[..., :, j], col, rtol=1e-5, atol=1e-5)
        row = (H.grad_xi(x + e, xi) - H.grad_xi(x - e, xi)) / (2 * step)
        assert np.allclose(hmix[..., j, :], row, rtol=1e-5, atol=1e-5)


@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2))
def test_harmonic_symmetric_in_x_and_xi(a, b):
    H = builtin_symbol("harmonic_oscillator", d=2)
    a, b = np.array(a), np.array(b)
    assert H.h(a, b) == pytest.approx(H.h(b, a), rel=1e-15, abs=1e-15)


def test_eikonal_zero_momentum_is_a_domain_error():
    from caustica import SymbolDomainError

    H = builtin_symbol("eikonal", coefficient="1")
    with pytest.raises(SymbolDomainError):
        H.grad_xi(np.array([0.3]), np.array([0.0]))


@pytest.mark.parametrize(
    "name, params",
    [("unknown_symbol", {}), ("schrodinger_potential", {}), ("eikonal", {}), ("airy_cubic", {"d": 2})],
)
def test_builtin_errors(name, params):
    with pytest.raises(ScenarioError):
        builtin_symbol(name, params)


def test_expression_symbol_matches_builtin():
    H = symbol_from_expression("xi**2/2 + x**2/2")
    ref = builtin_symbol("harmonic_oscillator")
    rng = np.random.default_rng(2)
    x, xi = rng.normal(size=(30, 1)), rng.normal(size=(30, 1))
    assert np.allclose(H.h(x, xi), ref.h(x, xi), atol=1e-14)
    assert np.allclose(H.grad_x(x, xi), ref.grad_x(x, xi), atol=1e-14)
    assert np.allclose(H.second_derivatives(x, xi)[2], ref.second_derivatives(x, xi)[2], atol=1e-14)


def test_initial_data_from_expressions():
    I = InitialData.from_expressions("exp(-x**2)/sqrt(pi)", "-ln(cosh(x))", mass_box=Box((-12.0,), (12.0,)))
    x = np.linspace(-3, 3, 13)[:, None]
    assert np.allclose(I.grad_S_I(x)[:, 0], -np.tanh(x[:, 0]), atol=1e-14)
    assert np.allclose(I.hessian(x)[:, 0, 0], -1 / np.cosh(x[:, 0]) ** 2, atol=1e-12)
    assert I.mass == pytest.approx(1.0, abs=1e-12)


def test_step_phase_reports_kinks():
    I = InitialData.from_expressions("1", "x*step(-x) + (x - x**2/2)*step(x)*step(1 - x)")
    assert I.kinks == (0.0, 1.0)


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_roundtrip_bit_identically(name, tmp_path):
    s = preset(name)
    path = tmp_path / f"{name}.json"
    dump_scenario(s, path)
    text = path.read_text()
    assert text == preset_json(name)
    again = load_scenario(path)
    assert dumps_document(again.document) == text
    assert again.tolerances == s.tolerances
    assert again.region == s.region and again.xi_box == s.xi_box


def test_example_1_1_validates_cleanly():
    rep = validate_scenario(preset("ex_1_1_rarefaction"))
    assert rep.ok, rep.failed()


def test_airy_validation_flags_finite_time_failure():
    rep = validate_scenario(preset("appendix1_airy_k"))
    assert rep.failed() == ["global_flow"]
    assert rep.blowup_times and abs(rep.blowup_times[0]) <= 0.5 + 1e-6
    assert any("self-adjoint" in u for u in rep.to_dict()["unchecked"])


@pytest.mark.parametrize("field", ["root", "ode_rtol", "caustic"])
@pytest.mark.parametrize("value", [0.0, -1e-3])
def test_nonpositive_tolerance_rejected(field, value):
    doc = preset_document("ex_1_1_rarefaction")
    doc["tolerances"][field] = value
    with pytest.raises(ScenarioError):
        scenario_from_document(doc)
    with pytest.raises(ScenarioError):
        Tolerances(**{field: value})


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("hamiltonian"),
        lambda d: d.update(xi_box=[[1.0, -1.0]]),
        lambda d: d.update(region={"x": [[0.0, 1.0, 2.0]]}),
        lambda d: d["initial"].pop("S_I"),
    ],
)
def test_malformed_documents_rejected(mutate):
    doc = preset_document("ex_1_1_rarefaction")
    mutate(doc)
    with pytest.raises(ScenarioError):
        scenario_from_document(doc)


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_custom_hamiltonian_document():
    doc = preset_document("ex_1_1_rarefaction")
    doc["hamiltonian"] = {"name": "custom", "expr": "xi**2/2 + c*x", "params": {"c": 0.5}}
    s = scenario_from_document(doc)
    assert s.hamiltonian.grad_x(np.array([1.0]), np.array([0.0]))[0] == pytest.approx(0.5)
    assert json.loads(dumps_document(s.document))["hamiltonian"]["expr"] == "xi**2/2 + c*x"
