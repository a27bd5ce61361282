"""Cauchy-Uniform / Gaussian-Uniform mixture EM over the loop-closure labels.

Per-constraint error functionals:
  cauchy:   A = mean over matches of ln(1 + ||T_i p - T_j q||^2 / sigma^2)
  gaussian: B = mean over matches of ||T_i p - T_j q||^2

The inlier posterior of a loop is theta / (theta + exp(2A)) in cauchy mode
and theta / (theta + B^2) in gaussian mode, evaluated in log space so large
errors saturate to 0 instead of overflowing. theta is learned from the
odometry constraints, which act as known-inlier exemplars: the median error
term is mapped to posterior p_hat.

Per-constraint error evaluation is pure and safe to fan out over workers;
the EM driver itself is sequential, and each iteration replaces the
posterior state wholesale rather than mutating it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import se3, solver
from .model import Hyperparams, PosteriorState, ProblemGraph, initialize_poses
from .se3 import Pose


class EmError(Exception):
    pass


def _squared_residuals(p, q, pose_i: Pose, pose_j: Pose) -> np.ndarray:
    e = se3.transform_points(pose_i, p) - se3.transform_points(pose_j, q)
    return np.einsum("ij,ij->i", e, e)


def error_cauchy(p, q, pose_i: Pose, pose_j: Pose, sigma: float) -> float:
    """Mean log-Cauchy error of a match set (dimensionless)."""
    s = _squared_residuals(p, q, pose_i, pose_j)
    return float(np.mean(np.log1p(s / (sigma * sigma))))


def error_gaussian(p, q, pose_i: Pose, pose_j: Pose) -> float:
    """Mean squared residual of a match set (m^2)."""
    return float(np.mean(_squared_residuals(p, q, pose_i, pose_j)))


def lower_median(values) -> float:
    """Order-statistic median: lower of the two middle values for even counts."""
    ordered = sorted(float(v) for v in values)
    if not ordered:
        raise ValueError("median of empty sequence")
    return ordered[(len(ordered) - 1) // 2]


def theta_from_errors(errors, p_hat: float) -> float:
    """Solve theta / (theta + median(errors)) = p_hat for theta."""
    return p_hat * lower_median(errors) / (1.0 - p_hat)


def learn_theta_cauchy(graph: ProblemGraph, poses: list[Pose], sigma: float, p_hat: float) -> float:
    """Calibrate theta so the median odometry error term exp(2A) maps to p_hat.

    The median is taken over A (a monotone transform of exp(2A)), which gives
    the identical order statistic without risking overflow in the exponent.
    """
    if not graph.odometry:
        raise EmError("cannot learn theta without odometry constraints")
    a_values = [
        error_cauchy(c.p, c.q, poses[c.i], poses[c.i + 1], sigma) for c in graph.odometry
    ]
    return p_hat / (1.0 - p_hat) * math.exp(2.0 * lower_median(a_values))


def learn_theta_gaussian(epsilon: float, p_hat: float, calibration: str = "rms") -> float:
    """Gaussian-mode constant from the residual bound epsilon.

    "literal" takes epsilon^2 as the reference error term; "rms" takes
    (epsilon^2)^2 so that the posterior, whose error term is B^2, equals
    p_hat exactly when the RMS residual is epsilon.
    """
    if calibration == "literal":
        m_hat = epsilon * epsilon
    elif calibration == "rms":
        m_hat = epsilon ** 4
    else:
        raise ValueError(f"unknown calibration {calibration!r}")
    return p_hat * m_hat / (1.0 - p_hat)


def posterior_cauchy(a_values: np.ndarray, theta: float) -> np.ndarray:
    """theta / (theta + exp(2A)) computed as a sigmoid in log space."""
    return expit(math.log(theta) - 2.0 * np.asarray(a_values, dtype=float))


def posterior_gaussian(b_values: np.ndarray, theta: float) -> np.ndarray:
    """theta / (theta + B^2), log-space; B == 0 maps to posterior 1."""
    b = np.asarray(b_values, dtype=float)
    out = np.ones_like(b)
    pos = b > 0.0
    out[pos] = expit(math.log(theta) - 2.0 * np.log(b[pos]))
    return out


def loop_errors(graph: ProblemGraph, poses: list[Pose], params: Hyperparams) -> np.ndarray:
    """Per-loop error functional at the given poses (A in cauchy mode, B in gaussian)."""
    if params.mode == "cauchy":
        return np.array(
            [error_cauchy(c.p, c.q, poses[c.i], poses[c.j], params.sigma) for c in graph.loops]
        )
    return np.array([error_gaussian(c.p, c.q, poses[c.i], poses[c.j]) for c in graph.loops])


def e_step(graph: ProblemGraph, poses: list[Pose], theta: float, params: Hyperparams) -> PosteriorState:
    if not theta > 0:
        raise ValueError("theta must be positive")
    errors = loop_errors(graph, poses, params)
    if params.mode == "cauchy":
        post = posterior_cauchy(errors, theta)
    else:
        post = posterior_gaussian(errors, theta)
    return PosteriorState(theta=theta, posteriors=post)


def classify_loops(state: PosteriorState, inlier_threshold: float = 0.5) -> np.ndarray:
    """Boolean inlier labels; ties go to outlier (strict inequality)."""
    return state.posteriors > inlier_threshold


@dataclass
class EmIteration:
    theta: float
    objective_start: float  # M-step objective at entry, current posteriors
    objective_end: float  # M-step objective after optimization
    inlier_count: int  # posteriors above the classification threshold
    max_pose_update: float  # largest twist norm of any pose update this iteration
    objective_path: list[float] = field(default_factory=list)  # accepted-step objectives


@dataclass
class EmTrace:
    iterations: list[EmIteration] = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.iterations)


def _max_update(old: list[Pose], new: list[Pose]) -> float:
    out = 0.0
    for a, b in zip(old, new):
        out = max(out, float(np.linalg.norm(se3.log(se3.compose(b, se3.inverse(a))))))
    return out


def _learn_theta(graph, poses, params: Hyperparams) -> float:
    if params.mode == "cauchy":
        return learn_theta_cauchy(graph, poses, params.sigma, params.p_hat)
    return learn_theta_gaussian(params.epsilon, params.p_hat, params.gaussian_calibration)


def run_em(
    graph: ProblemGraph, params: Hyperparams
) -> tuple[list[Pose], PosteriorState, EmTrace]:
    """Alternate posterior updates and pose optimization until the M-step
    objective stalls.

    Returns the final poses, the posterior state evaluated at those poses,
    and the per-iteration trace. With no loop constraints this is a single
    pose optimization over odometry alone.
    """
    poses = initialize_poses(graph)
    trace = EmTrace()

    if not graph.loops:
        state = PosteriorState(theta=_learn_theta(graph, poses, params), posteriors=np.zeros(0))
        blocks = solver.build_problem(graph, state, params)
        try:
            poses_new, report = solver.solve(blocks, poses, gauge=0)
        except solver.SolverError as err:
            raise EmError(f"EM iteration 1: {err}") from err
        trace.iterations.append(
            EmIteration(
                theta=state.theta,
                objective_start=report.initial_objective,
                objective_end=report.final_objective,
                inlier_count=0,
                max_pose_update=_max_update(poses, poses_new),
                objective_path=report.objective_path,
            )
        )
        trace.converged = True
        return poses_new, state, trace

    theta = None
    prev_objective = None
    for iteration in range(1, params.max_em_iters + 1):
        if theta is None or (params.refresh_theta and params.mode == "cauchy"):
            theta = _learn_theta(graph, poses, params)
        state = e_step(graph, poses, theta, params)
        blocks = solver.build_problem(graph, state, params)
        try:
            poses_new, report = solver.solve(blocks, poses, gauge=0)
        except solver.SolverError as err:
            raise EmError(f"EM iteration {iteration}: {err}") from err
        trace.iterations.append(
            EmIteration(
                theta=theta,
                objective_start=report.initial_objective,
                objective_end=report.final_objective,
                inlier_count=int(np.sum(state.posteriors > params.inlier_threshold)),
                max_pose_update=_max_update(poses, poses_new),
                objective_path=report.objective_path,
            )
        )
        poses = poses_new
        if prev_objective is not None:
            rel = abs(prev_objective - report.final_objective) / max(abs(prev_objective), 1e-300)
            if rel < params.em_tol:
                trace.converged = True
                break
        prev_objective = report.final_objective

    # refresh the posterior at the final poses so labels match what we return
    if params.refresh_theta and params.mode == "cauchy":
        theta = _learn_theta(graph, poses, params)
    state = e_step(graph, poses, theta, params)
    return poses, state, trace
