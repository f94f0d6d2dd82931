"""Dynamic panel learning models: simulation, profile sieve MLE with a
nonparametric mixing distribution, and variance-decomposition functionals.
"""

from .estimator import (FitConfig, FitResult, OptimizationFailureError,
                        build_grid, fit, least_squares_start, pack, unpack)
from .functionals import (DecompositionResult, EmptyCellError,
                          StructuralFunctions, WeightedSumSpec, decompose_t,
                          decompose_t1, discounted_spec, mixture_moments,
                          mixture_quantile, posterior_variance,
                          structural_functions)
from .likelihood import (DegenerateRowError, GaussianParts, LikelihoodMatrix,
                         complete_loglik, loglik_matrix, observed_loglik,
                         outcome_mean_cov)
from .model import (ChoiceParams, InvalidStateError, Observation,
                    OutcomeParams, PanelData, PosteriorState,
                    conditional_outcome_moments, posterior_path,
                    posterior_update, prior_state)
from .npmle import (GridMixture, InnerSolution, em_sweep, kkt_residual,
                    solve_weights)
from .profile import (BoundaryKinkError, DegenerateKktError, ProfileEval,
                      profile_gradient, profile_value, weight_jacobian)
from .simulate import (DgpConfig, LatentRecord, MixtureSpec,
                       UnsupportedParameterError, ccp, ccp_crra,
                       default_outcome_params, make_rng, sample_xk,
                       simulate_panel, simulate_panel_crra)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
