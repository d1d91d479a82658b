"""Recovery of column-wise sparse, l1-column-flat matrix signals under the max-column-l1 norm."""

from .errors import (ColflatError, ConditionViolatedError, DomainError, NoConvergenceError,
                     ParameterError, SingularityError)
from .signal_model import (SparsityPattern, as_signal, column_l1, flatness_defect,
                           gen_sparse_flat_signal, restrict_to_pattern, sigma_s_tail,
                           support_pattern)
from .norms import (descent_cone_sup, dist_to_subdifferential, dist_to_subgradient_cone,
                    dual_norm, maximal_columns, norm_colmax_l1, project_dual_ball,
                    project_polar_cone, prox_colmax_l1, subdiff_contains, subdiff_element)
from .operators import (DenseOp, MeasurementOp, RestrictedOp, SumKroneckerOp, adjoint, apply,
                        make_dense, make_identity, make_kronecker, make_random_kronecker,
                        make_sum_kronecker, normal_matrix, pseudo_inverse_apply, restrict_op)
from .solver import (SolveResult, SolverConfig, kkt_residual, oracle_solve_small,
                     solve_constrained, solve_penalized)
from .conditions import (ConditionReport, check_erc, check_flatness_condition,
                         compute_mrip_constants, estimate_nsp_ratio, estimate_robust_nsp,
                         opnorm_exotic, rip_to_nsp_constants, thm41_report)
from .widths import (WidthEstimate, analytic_width_bound, estimate_lambda_min,
                     mc_width_kronecker, mc_width_sq, necessary_measurements, q_xi_estimate,
                     required_measurements)

__version__ = "0.1.0"
