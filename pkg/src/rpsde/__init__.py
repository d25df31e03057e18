"""Backward Euler simulation of random periodic solutions of semilinear SDEs with additive noise."""

from .analysis import (ErrorTable, MomentBoundReport, RateReport, fit_rate, holder_check,
                       moment_bound, moment_bound_check, ms_error_table)
from .integrator import SolverConfig, SolverError, Trajectory, drift_jacobian, implicit_step, integrate
from .model import (AssumptionReport, ModelError, ProbeConfig, SdeModel, builtin_example, eval_drift,
                    model_from_dict, validate_assumptions)
from .noise import GridSpec, WienerPath, coarsen, sample_path, shift
from .pullback import cauchy_diagnostic, periodicity_gap, pullback_values

__version__ = "0.1.0"
