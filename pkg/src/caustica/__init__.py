"""Multivalued geometrical optics for linear dispersive equations.

Ray tracing through the Hamiltonian flow, reconstruction of every phase
branch that reaches a point, caustic detection with hot/cool classification
of focal points, residual checks for the associated fluid systems, and a
finite-eps spectral/Wigner oracle for the eps -> 0 limit.
"""

from ._accel import backend
from .branches import (
    BranchPoint,
    BranchSet,
    CausticError,
    CausticPoint,
    CausticScan,
    ConcentrationReport,
    MassBalance,
    UnreachableBranchError,
    caustic_scan,
    concentration,
    density,
    density_batch,
    f_xt,
    find_branches,
    find_branches_batch,
    integrate_density,
    wkb_superposition,
)
from .flow import (
    BlowupEvent,
    FlowBlowupError,
    FlowState,
    PhasePoint,
    SymbolNaNError,
    flow,
    flow_batch,
    ray,
    ray_jacobian,
    rays,
    stormer_verlet,
)
from .fluid import (
    FluidField,
    WeightFunction,
    euler_residual,
    generalized_moment_residual,
    modified_force,
    to_conservative,
)
from .presets import PRESET_NAMES, preset, preset_document
from .symbols import (
    Box,
    HamiltonianSymbol,
    InitialData,
    Potential,
    Scenario,
    ScenarioError,
    SymbolDomainError,
    Tolerances,
    builtin_symbol,
    dump_scenario,
    load_scenario,
    scenario_from_document,
    symbol_from_expression,
    validate_scenario,
)
from .wigner import (
    ComparisonReport,
    PeriodicGrid,
    PhaseSpaceGrid,
    WaveField,
    compare,
    evolve,
    expectation,
    husimi,
    moment0,
    wigner_transform,
    wkb_initial,
)

__version__ = "0.1.0"

__all__ = [
    "BlowupEvent",
    "Box",
    "BranchPoint",
    "BranchSet",
    "CausticError",
    "CausticPoint",
    "CausticScan",
    "ComparisonReport",
    "ConcentrationReport",
    "FlowBlowupError",
    "FlowState",
    "FluidField",
    "HamiltonianSymbol",
    "InitialData",
    "MassBalance",
    "PRESET_NAMES",
    "PeriodicGrid",
    "PhasePoint",
    "PhaseSpaceGrid",
    "Potential",
    "Scenario",
    "ScenarioError",
    "SymbolDomainError",
    "SymbolNaNError",
    "Tolerances",
    "UnreachableBranchError",
    "WaveField",
    "WeightFunction",
    "backend",
    "builtin_symbol",
    "caustic_scan",
    "compare",
    "concentration",
    "density",
    "density_batch",
    "dump_scenario",
    "euler_residual",
    "evolve",
    "expectation",
    "f_xt",
    "find_branches",
    "find_branches_batch",
    "flow",
    "flow_batch",
    "generalized_moment_residual",
    "husimi",
    "integrate_density",
    "load_scenario",
    "modified_force",
    "moment0",
    "preset",
    "preset_document",
    "ray",
    "ray_jacobian",
    "rays",
    "scenario_from_document",
    "stormer_verlet",
    "symbol_from_expression",
    "to_conservative",
    "validate_scenario",
    "wigner_transform",
    "wkb_initial",
    "wkb_superposition",
]
