"""H(div)-conforming finite elements with pointwise mass conservation for Biot consolidation."""

from .fespace import build_space, check_div_compat, project_l2, tabulate, trace_eval
from .forms import BiotProblem, assemble_ah, assemble_blocks, assemble_dh, assemble_div, assemble_rhs
from .linalg import compose, solve
from .mesh import BoundarySpec, DisplacementBC, PressureBC, build_cartesian_mesh, classify_boundary
from .stepper import BiotState, TimeStepper, build_spaces, initial_state, mass_audit, step
from .verification import compute_errors, convergence_study, exact_solution, mass_balance_study

__version__ = "0.1.0"
