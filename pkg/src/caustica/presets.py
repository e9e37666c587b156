"""Shipped scenario documents for the worked case studies."""

from __future__ import annotations

import copy
import math
from typing import Any

from .symbols import Scenario, dumps_document, scenario_from_document

GAUSSIAN = "exp(-x**2)/sqrt(pi)"
LIPSCHITZ_PHASE = "x*step(-x) + (x - x**2/2)*step(x)*step(1 - x)"

_DEFAULT_TOL = {"ode_rtol": 1e-10, "ode_atol": 1e-12, "root": 1e-10, "dedupe": 1e-6, "caustic": 1e-6, "mass": 1e-10}


def _doc(name, hamiltonian, S_I, region, t_range, times, xi_box, *, params=None, expect_blowup=False, note=""):
    doc: dict[str, Any] = {
        "name": name,
        "dim": 1,
        "hamiltonian": hamiltonian,
        "initial": {"n_I": GAUSSIAN, "S_I": S_I},
        "region": {"x": [list(region)], "t_range": list(t_range)},
        "times": list(times),
        "tolerances": dict(_DEFAULT_TOL),
        "xi_box": [list(xi_box)],
        "expect_blowup": expect_blowup,
        "note": note,
    }
    if params:
        doc["initial"]["params"] = dict(params)
    return doc


PRESETS: dict[str, dict[str, Any]] = {
    "ex_1_1_rarefaction": _doc(
        "ex_1_1_rarefaction",
        {"name": "free_quadratic"},
        "x**2/2",
        (-12.0, 12.0),
        (0.0, 3.0),
        (0.0, 0.5, 1.0, 2.0),
        (-13.0, 13.0),
        note="spreading rays, single smooth branch for all t >= 0",
    ),
    "ex_1_2_focus": _doc(
        "ex_1_2_focus",
        {"name": "free_quadratic"},
        "-x**2/2",
        (-12.0, 12.0),
        (0.0, 2.0),
        (0.5, 1.0, 2.0),
        (-13.0, 13.0),
        note="all rays meet at x = 0, t = 1",
    ),
    "ex_1_3_cusp_smooth": _doc(
        "ex_1_3_cusp_smooth",
        {"name": "free_quadratic"},
        "-ln(cosh(x))",
        (-8.0, 8.0),
        (0.0, 2.0),
        (0.5, 1.0, 2.0),
        (-1.5, 1.5),
        note="compressive smooth phase, cusp caustic from (0, 1) with no point concentration",
    ),
    "ex_1_3_cusp_lipschitz": _doc(
        "ex_1_3_cusp_lipschitz",
        {"name": "free_quadratic"},
        LIPSCHITZ_PHASE,
        (-8.0, 8.0),
        (0.0, 2.0),
        (0.5, 1.0, 2.0),
        (-0.5, 1.5),
        note="piecewise phase, focus at (1, 1) carrying the mass of [0, 1], triple-valued for 1 < x <= t",
    ),
    "harmonic_k": _doc(
        "harmonic_k",
        {"name": "harmonic_oscillator"},
        "k*x",
        (-6.0, 6.0),
        (0.0, 5.0),
        (math.pi / 8, math.pi / 4, math.pi / 2),
        (-15.0, 15.0),
        params={"k": 1.0},
        note="uniform initial momentum k; all rays refocus at odd multiples of pi/2",
    ),
    "appendix1_airy_k": _doc(
        "appendix1_airy_k",
        {"name": "airy_variable"},
        "k*x",
        (-6.0, 6.0),
        (0.0, 0.6),
        (0.25, 0.45),
        (-1.0, 6.0),
        params={"k": 1.0},
        expect_blowup=True,
        note="H = -x xi^3 has no global flow: rays leave every bounded set at t = 1/(2 k^2)",
    ),
}

PRESET_NAMES = tuple(PRESETS)


def preset_document(name: str) -> dict[str, Any]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    return copy.deepcopy(PRESETS[name])


def preset(name: str) -> Scenario:
    return scenario_from_document(preset_document(name))


def preset_json(name: str) -> str:
    return dumps_document(preset_document(name))
