"""Synthetic ground-truth scenes with controlled outlier injection, plus metrics.

Trajectories revisit themselves by construction (the circle runs four laps,
the figure-eight crosses itself), so genuine loop closures exist. True loops
connect a keyframe to its spatially nearest non-adjacent fragments; on the
circle those partners sit at several lap offsets, which knits the whole
trajectory into one rigid web instead of a single ladder between two laps.
False loops connect far-apart fragments with entirely random correspondences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .model import (
    LoopClosureConstraint,
    OdometryConstraint,
    ProblemGraph,
    fit_rigid_transform,
)
from .se3 import Pose

SHAPES = ("line", "circle", "figure-eight")


class ScenarioError(Exception):
    pass


@dataclass
class ScenarioConfig:
    num_fragments: int = 100
    shape: str = "circle"
    spacing: float = 10.0  # m between consecutive fragments
    matches_per_constraint: int = 50
    loops_per_keyframe: int = 5
    keyframe_stride: int = 5
    match_noise: float = 0.05  # m, isotropic, applied to the q side of inlier matches
    outlier_match_fraction: float = 0.3
    outlier_displacement: float = 5.0  # m, ball radius for displaced matches
    outlier_loop_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ScenarioError(f"unknown shape {self.shape!r}")
        if not self.spacing > 0:
            raise ScenarioError("spacing must be positive")
        if self.matches_per_constraint < 3:
            raise ScenarioError("need at least 3 matches per constraint")
        for name in ("outlier_match_fraction", "outlier_loop_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ScenarioError(f"{name} must lie in [0, 1]")
        if self.keyframe_stride < 1 or self.loops_per_keyframe < 1:
            raise ScenarioError("keyframe_stride and loops_per_keyframe must be >= 1")


@dataclass
class EvalResult:
    mean_translation_error: float  # m, after aligning on the first five poses
    precision: float
    recall: float
    confusion: list[tuple[int, int, bool, bool]] = field(default_factory=list)
    # rows are (i, j, predicted inlier, oracle inlier)


def _yaw_pose(position: np.ndarray, yaw: float) -> Pose:
    quat = np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])
    return Pose(quat, position)


def _trajectory(config: ScenarioConfig) -> list[Pose]:
    n, d = config.num_fragments, config.spacing
    if config.shape == "line":
        return [_yaw_pose(np.array([k * d, 0.0, 0.0]), 0.0) for k in range(n)]
    if config.shape == "circle":
        # several laps: fragment k revisits k + m*n/laps, giving loop partners
        # at multiple offsets that knit the whole trajectory together; small
        # scenes drop to two laps so the circle stays wide enough for false
        # loops (pairs farther than 3x spacing) to exist at all
        laps = 4 if n >= 48 else 2
        radius = n * d / (2.0 * laps * math.pi)
        poses = []
        for k in range(n):
            angle = 2.0 * laps * math.pi * k / n
            pos = np.array([radius * math.cos(angle), radius * math.sin(angle), 0.0])
            poses.append(_yaw_pose(pos, angle + 0.5 * math.pi))
        return poses
    # figure-eight: Gerono lemniscate resampled to uniform arc length
    t = np.linspace(0.0, 2.0 * math.pi, 20000, endpoint=False)
    xy = np.stack([np.sin(t), np.sin(t) * np.cos(t)], axis=1)
    seg = np.linalg.norm(np.diff(xy, axis=0, append=xy[:1]), axis=1)
    length_unit = float(seg.sum())
    scale = n * d / length_unit
    cumulative = np.concatenate([[0.0], np.cumsum(seg)])[:-1]
    targets = np.arange(n) * (length_unit / n)
    idx = np.searchsorted(cumulative, targets, side="right") - 1
    poses = []
    for k in idx:
        pos = scale * np.array([xy[k, 0], xy[k, 1], 0.0])
        nxt = xy[(k + 1) % len(xy)] - xy[k]
        poses.append(_yaw_pose(pos, math.atan2(nxt[1], nxt[0])))
    return poses


def _ball(rng: np.random.Generator, count: int, radius: float) -> np.ndarray:
    """Uniform draws from a solid ball."""
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(count, 1)) ** (1.0 / 3.0)
    return direction * r


def _match_set(
    rng: np.random.Generator,
    config: ScenarioConfig,
    pose_a: Pose,
    pose_b: Pose,
    point_radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Inlier-style matches: shared world points near the two fragments, noise on
    the q side, and the configured fraction displaced into outliers."""
    k = config.matches_per_constraint
    center = 0.5 * (pose_a.trans + pose_b.trans)
    world = center + _ball(rng, k, point_radius)
    inv_a, inv_b = se3.inverse(pose_a), se3.inverse(pose_b)
    p = se3.transform_points(inv_a, world)
    q = se3.transform_points(inv_b, world)
    if config.match_noise > 0:
        q = q + rng.normal(scale=config.match_noise, size=(k, 3))
    n_out = round(config.outlier_match_fraction * k)
    if n_out:
        which = rng.choice(k, size=n_out, replace=False)
        q[which] = se3.transform_points(inv_b, world[which]) + _ball(
            rng, n_out, config.outlier_displacement
        )
    return p, q


def _false_match_set(
    rng: np.random.Generator,
    config: ScenarioConfig,
    pose_a: Pose,
    pose_b: Pose,
    point_radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Random correspondences: each side samples points near its own fragment."""
    k = config.matches_per_constraint
    world_a = pose_a.trans + _ball(rng, k, point_radius)
    world_b = pose_b.trans + _ball(rng, k, point_radius)
    return (
        se3.transform_points(se3.inverse(pose_a), world_a),
        se3.transform_points(se3.inverse(pose_b), world_b),
    )


# a pair only counts as a revisit when the chain index gap is too large for
# plain forward travel to explain the spatial proximity (radius is 2.5x the
# spacing, so anything within 3 steps could just be chain overlap)
_MIN_REVISIT_GAP = 4


def _revisit_partners(
    translations: np.ndarray, k: int, radius: float
) -> list[tuple[float, int]]:
    """Genuinely revisited fragments within radius of fragment k, nearest first."""
    dist = np.linalg.norm(translations - translations[k], axis=1)
    out = [
        (float(dist[j]), j)
        for j in range(len(translations))
        if abs(j - k) >= _MIN_REVISIT_GAP and dist[j] <= radius
    ]
    out.sort()
    return out


def plan_loops(config: ScenarioConfig, gt: list[Pose]) -> tuple[list[tuple[int, int]], int]:
    """Unique true-loop pairs from keyframe revisits, plus the false-loop count
    that realizes the configured outlier-loop ratio exactly (within rounding)."""
    n = config.num_fragments
    k2 = config.loops_per_keyframe
    f_out = config.outlier_loop_fraction
    keyframes = list(range(0, n, config.keyframe_stride))
    translations = np.stack([p.trans for p in gt])
    revisit_radius = 2.5 * config.spacing

    if f_out == 1.0:
        return [], k2 * len(keyframes)

    per_kf = round((1.0 - f_out) * k2)
    if per_kf < 1:
        raise ScenarioError(
            "outlier_loop_fraction too close to 1: true loops per keyframe rounds to 0"
        )
    true_pairs: set[tuple[int, int]] = set()
    for k in keyframes:
        # keyframes without revisits (e.g. straight stretches) contribute none
        for _, j in _revisit_partners(translations, k, revisit_radius)[:per_kf]:
            true_pairs.add((min(k, j), max(k, j)))
    n_true = len(true_pairs)
    if n_true == 0:
        raise ScenarioError(
            f"config requests true loops (outlier_loop_fraction {f_out} < 1) but the "
            f"trajectory offers 0 revisit pairs"
        )
    n_false = round(n_true * f_out / (1.0 - f_out))
    return sorted(true_pairs), n_false


def generate(config: ScenarioConfig) -> ProblemGraph:
    """Deterministic scene for a given config; carries ground truth and oracle labels."""
    rng = np.random.default_rng(config.seed)
    gt = _trajectory(config)
    n = config.num_fragments
    point_radius = 1.5 * config.spacing

    odometry = [
        OdometryConstraint(i, *_match_set(rng, config, gt[i], gt[i + 1], point_radius))
        for i in range(n - 1)
    ]

    true_pairs, n_false = plan_loops(config, gt)
    translations = np.stack([p.trans for p in gt])
    false_pairs: set[tuple[int, int]] = set()
    taken = set(true_pairs)
    guard = 0
    while len(false_pairs) < n_false:
        guard += 1
        if guard > 100 * max(n_false, 1) + 1000:
            raise ScenarioError("could not sample enough far-apart false loop pairs")
        i, j = sorted(int(v) for v in rng.integers(0, n, size=2))
        if j - i < 2 or (i, j) in taken:
            continue
        if np.linalg.norm(translations[i] - translations[j]) <= 3.0 * config.spacing:
            continue
        false_pairs.add((i, j))
        taken.add((i, j))

    loops = []
    labels: dict[tuple[int, int], bool] = {}
    true_set = set(true_pairs)
    for i, j in sorted(taken):
        truth = (i, j) in true_set
        maker = _match_set if truth else _false_match_set
        p, q = maker(rng, config, gt[i], gt[j], point_radius)
        loops.append(LoopClosureConstraint(i, j, p, q))
        labels[(i, j)] = truth

    return ProblemGraph(
        num_fragments=n,
        odometry=odometry,
        loops=loops,
        initial_poses=None,
        ground_truth=gt,
        oracle_labels=labels,
    )


def evaluate(poses: list[Pose], graph: ProblemGraph, labels) -> EvalResult:
    """Trajectory error after aligning the first five poses, plus loop precision
    and recall against the graph's oracle labels.

    `labels` are predicted inlier booleans aligned with graph.loops.
    """
    if graph.ground_truth is None:
        raise ScenarioError("graph carries no ground truth")
    if graph.oracle_labels is None:
        raise ScenarioError("graph carries no oracle loop labels")
    n = graph.num_fragments
    if n < 6:
        raise ScenarioError("need at least 6 fragments to evaluate (5 for alignment)")

    est = np.stack([p.trans for p in poses])
    gt = np.stack([p.trans for p in graph.ground_truth])
    align = fit_rigid_transform(est[:5], gt[:5])
    aligned = se3.transform_points(align, est)
    errors = np.linalg.norm(aligned[5:] - gt[5:], axis=1)
    ate = float(errors.mean())

    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if len(labels) != len(graph.loops):
        raise ScenarioError(f"{len(labels)} labels for {len(graph.loops)} loops")
    tp = fp = fn = 0
    confusion = []
    for c, predicted in zip(graph.loops, labels):
        oracle = graph.oracle_labels[c.pair]
        confusion.append((c.i, c.j, bool(predicted), bool(oracle)))
        if predicted and oracle:
            tp += 1
        elif predicted and not oracle:
            fp += 1
        elif oracle and not predicted:
            fn += 1
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    return EvalResult(ate, precision, recall, confusion)
