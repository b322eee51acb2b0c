"""Finite-horizon stochastic H-infinity control of Markov regime-switching
linear systems under partial information, solved as a soft-constrained
zero-sum LQ game."""

from .chain import (ChainBatch, ChainPath, make_rng, regime_at, sample_path, sample_paths,
                    stationary_distribution, transition_matrix)
from .errors import (ConditionViolation, HinfError, NoBracket, NonFiniteValue, ScenarioError,
                     SingularRhat, UnresolvedStep, UnsupportedDisturbance,
                     ValidationError)
from .evaluate import (CostEstimate, EvalReport, Perturbation, cost_mc, default_perturbations,
                       gamma_star, gamma_sweep, hinf_ratio, saddle_check, value_formula)
from .gains import (SaddleGains, algebraic_system_solve, player1_pair, player2_pair,
                    synthesize)
from .model import (Dims, GameModel, PiecewiseConstant, load_example, load_scenario,
                    make_model, parse_scenario, validate)
from .riccati import (RiccatiSolution, TimeGrid, blocks, is_solvable, make_grid, model_grid,
                      schur_identity_residuals, solvability, solvability_many, solve_all, solve_eta, solve_p,
                      solve_pi)
from .sim import (ControlPolicy, DisturbancePolicy, LinearFeedbackControl,
                  LinearFeedbackDisturbance, OpenLoopControl, OpenLoopDisturbance,
                  SaddleControl, SaddleDisturbance, ZeroControl, ZeroDisturbance,
                  filter_consistency_stats, outcome_policies, simulate, simulate_many,
                  simulate_path)

__version__ = "0.1.0"
