"""Desk-scale laboratory for hierarchical robust control of a 1-D linear
stochastic fourth-order equation (anti-diffusion + dispersion + dissipation)
driven by binomial-tree noise."""

__version__ = "0.1.0"

from .carleman import (AuditFailed, CarlemanParams, KappaFunction,
                       carleman_quotient, construct_kappa, evaluate_weights,
                       observability_quotient, verify_parameter_bounds)
from .config import (ExperimentConfig, ParseError, ValidationError,
                     config_hash, parse_config, serialize_config)
from .game import (CostReport, GameParams, NonContractionError, SaddleProblem,
                   SaddleSolution, Targets, direct_assembly_solve,
                   evaluate_follower_cost, evaluate_leader_cost,
                   evaluate_robust_cost, make_targets, solve_saddle_point,
                   verify_first_order_conditions, verify_saddle_inequalities)
from .leader import (AdjointSolution, LeaderData, PenalizedConfig,
                     PipelineReport, StageFailure, epsilon_sweep,
                     minimize_penalized, penalized_gradient,
                     solve_adjoint_system, stackelberg_pipeline)
from .mesh import (BandedOperator, Grid, IllConditionedSolve, ModelParams,
                   RegionMask, ViolatedGeometry, build_derivative_operator,
                   build_drift_operator, build_grid, region_mask, solve_banded)
from .runner import RunRecord, materialize, run, splitmix64, stage_seed
from .solvers import (BackwardInputs, BackwardSolution, ForwardInputs,
                      ForwardSolution, backward_solve, energy_report,
                      forward_solve, ito_pairing_check)
from .tree import (BinomialTree, TreeProcess, build_tree,
                   conditional_expectation, expectation,
                   martingale_coefficient, sample_path)
