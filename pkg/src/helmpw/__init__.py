"""Holomorphic embedding power flow with Padé-Weierstrass continuation and
reactive-limit complementarity."""
from .netmodel import (CaseError, CaseParseError, CaseValidationError, ConditioningError,
                       Network, load_case, parse_case, parse_json, parse_matpower, to_json)
from .helm import EmbeddingConfig, StageParams, initial_stage_params, run_stage
from .pw import PWOptions, PWNonConvergence, Solution, solve_pw
from .refsolver import NRReport, enumerate_assignments, newton_solve
from .diagnostics import (AT_QMAX, AT_QMIN, INTERIOR, complementarity_check,
                          convergence_trace, lagrangian_value, mismatch, verify)

__all__ = [
    "CaseError", "CaseParseError", "CaseValidationError", "ConditioningError",
    "Network", "load_case", "parse_case", "parse_json", "parse_matpower", "to_json",
    "EmbeddingConfig", "StageParams", "initial_stage_params", "run_stage",
    "PWOptions", "PWNonConvergence", "Solution", "solve_pw",
    "NRReport", "enumerate_assignments", "newton_solve",
    "AT_QMAX", "AT_QMIN", "INTERIOR", "complementarity_check", "convergence_trace",
    "lagrangian_value", "mismatch", "verify",
]
