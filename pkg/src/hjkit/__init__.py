"""hjkit: jet-space calculus for Hamilton-Jacobi reductions of PDEs."""

from .exprs import (EXACT_ONLY, EXACT_THEN_PROBABILISTIC, Expression,
                    SymbolTable, Verdict, ZeroTestPolicy, canonicalize,
                    differentiate, equal, eval_point, format_expr, is_zero,
                    latex_expr, parse_expr, substitute)
from .jet import (Bundle, JetVar, LieField, MultiIndex, SolvedPde,
                  is_lie_symmetry, multinomial, prolong_lie_field,
                  prolong_system, total_derivative)
from .connection import HolonomicConnection, curvature, is_flat
from .hj import (check_hj_solution, compose_flatness, generate_hj_system,
                 report_latex, synthesize_ansatz)
from .variational import (Lagrangian, MomentumSection, check_generalized_hj,
                          constraint_equations, el_solved, elh_system,
                          euler_lagrange, first_variation_defect,
                          hamiltonian_density, legendre_local,
                          reduce_hamiltonian)
from .numeric import (AxisSpec, GridSpec, SampledSection, integrate_section,
                      residual_closed_form, residual_sampled)
from .problem import ProblemFile, parse_problem, render_problem

__version__ = "0.1.0"
