"""Robust EM back-end for point-cloud fragment pose graphs.

Given odometry and loop-closure constraints expressed as raw 3D feature-match
sets, both contaminated by outliers, recover globally consistent fragment
poses and inlier/outlier labels for the loop closures.
"""

from .em import (
    EmError,
    EmIteration,
    EmTrace,
    classify_loops,
    e_step,
    error_cauchy,
    error_gaussian,
    learn_theta_cauchy,
    learn_theta_gaussian,
    run_em,
    theta_from_errors,
)
from .graphio import ParseError, RunReport, parse, parse_poses, write_graph, write_poses, write_report
from .model import (
    AlignmentError,
    FeatureMatch,
    Hyperparams,
    LoopClosureConstraint,
    OdometryConstraint,
    PosteriorState,
    ProblemGraph,
    Violation,
    initialize_poses,
    validate,
)
from .se3 import Pose, compose, exp, identity, inverse, log, retract, transform_point
from .solver import (
    ResidualBlock,
    SolverError,
    SolverReport,
    build_problem,
    residual_and_jacobian,
    solve,
)
from .synth import EvalResult, ScenarioConfig, ScenarioError, evaluate, generate

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "EmError",
    "EmIteration",
    "EmTrace",
    "EvalResult",
    "FeatureMatch",
    "Hyperparams",
    "LoopClosureConstraint",
    "OdometryConstraint",
    "ParseError",
    "Pose",
    "PosteriorState",
    "ProblemGraph",
    "ResidualBlock",
    "RunReport",
    "ScenarioConfig",
    "ScenarioError",
    "SolverError",
    "SolverReport",
    "Violation",
    "build_problem",
    "classify_loops",
    "compose",
    "e_step",
    "error_cauchy",
    "error_gaussian",
    "evaluate",
    "exp",
    "generate",
    "identity",
    "initialize_poses",
    "inverse",
    "learn_theta_cauchy",
    "learn_theta_gaussian",
    "log",
    "parse",
    "parse_poses",
    "residual_and_jacobian",
    "retract",
    "run_em",
    "solve",
    "theta_from_errors",
    "transform_point",
    "validate",
    "write_graph",
    "write_poses",
    "write_report",
]
