"""homlab: diffusions in space-time dependent degenerate media.

Build periodic and random-chessboard coefficient fields, simulate the
associated diffusions, solve regularized correctors on periodic cells, and
cross-validate the effective diffusivity matrix against rescaled Monte Carlo
ensembles.
"""

from .corrector import (EffectiveDiffusivity, assemble_apply, corrector_diffusivity,
                        discrete_norms, effective_matrix, extrapolate_gradient,
                        h_minus_one_norm, solve_corrector)
from .grid import Cell, CellDiscretization, GridFunction
from .medium import (CoefficientField, ControlConstants, MediumInstance, MollifierSpec,
                     build_medium, drift, drift_control, fit_control_constants,
                     make_chessboard_medium, make_constant_medium, make_periodic_medium,
                     make_trig1d_medium, make_trig1dt_medium, make_trig1dw_medium,
                     validate_control)
from .montecarlo import (DiagnosticsReport, EnsembleSpec, ergodic_average,
                         gaussianity_diagnostics, mc_diffusivity)
from .sde import (SdeConfig, Trajectory, observe_environment, rescale, simulate,
                  simulate_control, simulate_delta)

__version__ = "0.1.0"
