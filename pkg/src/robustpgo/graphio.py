"""Line-oriented text format for constraint graphs, poses, and run reports.

Graph grammar (whitespace-separated, '#' starts a comment):

    PCG 1 <N>                          header: format version, fragment count
    INIT <id> tx ty tz qw qx qy qz     optional initial pose
    GT <id> tx ty tz qw qx qy qz       optional ground-truth pose
    ODOM <i> <k>                       followed by exactly k M lines
    LOOP <i> <j> <k>                   followed by exactly k M lines
    M px py pz qx qy qz                one feature match (p then q)
    LABEL <i> <j> <0|1>                oracle label for a declared loop

Numbers are written with 17 significant digits so every float round-trips
exactly; writers emit records in canonical order (by id, then by (i, j)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em import EmTrace
from .model import LoopClosureConstraint, OdometryConstraint, ProblemGraph
from .se3 import Pose


class ParseError(Exception):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _pose_fields(p: Pose) -> str:
    t, q = p.trans, p.quat
    return " ".join(_fmt(v) for v in (t[0], t[1], t[2], q[0], q[1], q[2], q[3]))


def _parse_pose(parts: list[str], line_no: int) -> Pose:
    vals = [_float(v, line_no) for v in parts]
    return Pose(np.array(vals[3:7]), np.array(vals[0:3]))


def _int(token: str, line_no: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(line_no, f"expected integer, got {token!r}") from None


def _float(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(line_no, f"expected number, got {token!r}") from None


class _Lines:
    """Token stream over non-empty, comment-stripped lines."""

    def __init__(self, text: str):
        self.rows: list[tuple[int, list[str]]] = []
        for no, raw in enumerate(text.splitlines(), start=1):
            body = raw.split("#", 1)[0].strip()
            if body:
                self.rows.append((no, body.split()))
        self.pos = 0
        self.last_no = len(text.splitlines()) + 1

    def next(self) -> tuple[int, list[str]] | None:
        if self.pos >= len(self.rows):
            return None
        row = self.rows[self.pos]
        self.pos += 1
        return row


def _read_matches(lines: _Lines, count: int, line_no: int, what: str):
    p = np.zeros((count, 3))
    q = np.zeros((count, 3))
    for m in range(count):
        row = lines.next()
        if row is None or row[1][0] != "M":
            no = row[0] if row else lines.last_no
            raise ParseError(no, f"expected M record {m + 1} of {count} for {what}")
        no, parts = row
        if len(parts) != 7:
            raise ParseError(no, f"M record needs 6 numbers, got {len(parts) - 1}")
        vals = [_float(v, no) for v in parts[1:]]
        p[m] = vals[:3]
        q[m] = vals[3:]
    return p, q


def parse(text: str) -> ProblemGraph:
    """Parse a graph document; raises ParseError with the offending line number.

    Only syntax is enforced here; semantic rules (missing odometry, short
    loops, duplicates) are left to model.validate.
    """
    lines = _Lines(text)
    row = lines.next()
    if row is None:
        raise ParseError(1, "empty document, expected PCG header")
    no, parts = row
    if parts[0] != "PCG" or len(parts) != 3:
        raise ParseError(no, "expected header: PCG 1 <num_fragments>")
    if _int(parts[1], no) != 1:
        raise ParseError(no, f"unsupported format version {parts[1]}")
    n = _int(parts[2], no)
    if n < 1:
        raise ParseError(no, f"fragment count must be positive, got {n}")

    init: dict[int, Pose] = {}
    gt: dict[int, Pose] = {}
    odometry: list[OdometryConstraint] = []
    loops: list[LoopClosureConstraint] = []
    labels: dict[tuple[int, int], bool] = {}

    while (row := lines.next()) is not None:
        no, parts = row
        kind = parts[0]
        if kind in ("INIT", "GT"):
            if len(parts) != 9:
                raise ParseError(no, f"{kind} record needs id plus 7 numbers")
            idx = _int(parts[1], no)
            if not 0 <= idx < n:
                raise ParseError(no, f"{kind} id {idx} out of range [0, {n - 1}]")
            store = init if kind == "INIT" else gt
            if idx in store:
                raise ParseError(no, f"duplicate {kind} record for fragment {idx}")
            store[idx] = _parse_pose(parts[2:], no)
        elif kind == "ODOM":
            if len(parts) != 3:
                raise ParseError(no, "ODOM record needs <i> <match count>")
            i = _int(parts[1], no)
            k = _int(parts[2], no)
            if k < 0:
                raise ParseError(no, f"negative match count {k}")
            p, q = _read_matches(lines, k, no, f"ODOM {i}")
            odometry.append(OdometryConstraint(i, p, q))
        elif kind == "LOOP":
            if len(parts) != 4:
                raise ParseError(no, "LOOP record needs <i> <j> <match count>")
            i = _int(parts[1], no)
            j = _int(parts[2], no)
            k = _int(parts[3], no)
            if k < 0:
                raise ParseError(no, f"negative match count {k}")
            p, q = _read_matches(lines, k, no, f"LOOP {i} {j}")
            loops.append(LoopClosureConstraint(i, j, p, q))
        elif kind == "LABEL":
            if len(parts) != 4:
                raise ParseError(no, "LABEL record needs <i> <j> <0|1>")
            i = _int(parts[1], no)
            j = _int(parts[2], no)
            if parts[3] not in ("0", "1"):
                raise ParseError(no, f"LABEL value must be 0 or 1, got {parts[3]!r}")
            if (i, j) in labels:
                raise ParseError(no, f"duplicate LABEL for loop ({i}, {j})")
            labels[(i, j)] = parts[3] == "1"
        elif kind == "M":
            raise ParseError(no, "stray M record outside ODOM/LOOP")
        else:
            raise ParseError(no, f"unknown record kind {kind!r}")

    def _collect(store: dict[int, Pose], kind: str) -> list[Pose] | None:
        if not store:
            return None
        missing = [i for i in range(n) if i not in store]
        if missing:
            raise ParseError(
                lines.last_no, f"{kind} records incomplete: missing fragment {missing[0]}"
            )
        return [store[i] for i in range(n)]

    return ProblemGraph(
        num_fragments=n,
        odometry=odometry,
        loops=loops,
        initial_poses=_collect(init, "INIT"),
        ground_truth=_collect(gt, "GT"),
        oracle_labels=labels or None,
    )


def write_graph(graph: ProblemGraph) -> str:
    out = [f"PCG 1 {graph.num_fragments}"]
    if graph.initial_poses is not None:
        for i, p in enumerate(graph.initial_poses):
            out.append(f"INIT {i} {_pose_fields(p)}")
    if graph.ground_truth is not None:
        for i, p in enumerate(graph.ground_truth):
            out.append(f"GT {i} {_pose_fields(p)}")
    for c in sorted(graph.odometry, key=lambda c: c.i):
        out.append(f"ODOM {c.i} {c.size}")
        out.extend(_match_lines(c.p, c.q))
    for c in sorted(graph.loops, key=lambda c: (c.i, c.j)):
        out.append(f"LOOP {c.i} {c.j} {c.size}")
        out.extend(_match_lines(c.p, c.q))
    if graph.oracle_labels is not None:
        for (i, j), flag in sorted(graph.oracle_labels.items()):
            out.append(f"LABEL {i} {j} {1 if flag else 0}")
    return "\n".join(out) + "\n"


def _match_lines(p: np.ndarray, q: np.ndarray) -> list[str]:
    return [
        "M " + " ".join(_fmt(v) for v in (*pi, *qi)) for pi, qi in zip(p, q)
    ]


def write_poses(poses: list[Pose]) -> str:
    return "".join(f"POSE {i} {_pose_fields(p)}\n" for i, p in enumerate(poses))


def parse_poses(text: str) -> list[Pose]:
    store: dict[int, Pose] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if parts[0] != "POSE" or len(parts) != 9:
            raise ParseError(no, "expected: POSE <id> tx ty tz qw qx qy qz")
        idx = _int(parts[1], no)
        if idx in store:
            raise ParseError(no, f"duplicate POSE record for fragment {idx}")
        store[idx] = _parse_pose(parts[2:], no)
    missing = [i for i in range(len(store)) if i not in store]
    if missing:
        raise ParseError(len(text.splitlines()) + 1, f"missing POSE record {missing[0]}")
    return [store[i] for i in range(len(store))]


def write_poses_csv(poses: list[Pose]) -> str:
    rows = ["id,tx,ty,tz"]
    rows.extend(
        f"{i},{_fmt(p.trans[0])},{_fmt(p.trans[1])},{_fmt(p.trans[2])}"
        for i, p in enumerate(poses)
    )
    return "\n".join(rows) + "\n"


@dataclass
class RunReport:
    """Everything needed to audit a run: per-loop errors and posteriors at the
    final poses, the learned constant per iteration, the trace, and final
    metrics when ground truth was available."""

    mode: str
    pairs: list[tuple[int, int]]
    errors: np.ndarray  # per-loop error functional at the final poses
    posteriors: np.ndarray
    labels: np.ndarray  # predicted inlier booleans
    trace: EmTrace
    metrics: dict[str, float] = field(default_factory=dict)


def write_report(report: RunReport) -> str:
    out = ["REPORT 1", f"MODE {report.mode}", f"CONVERGED {1 if report.trace.converged else 0}"]
    for it, rec in enumerate(report.trace.iterations, start=1):
        out.append(f"THETA {it} {_fmt(rec.theta)}")
    for it, rec in enumerate(report.trace.iterations, start=1):
        out.append(
            f"TRACE {it} {_fmt(rec.objective_start)} {_fmt(rec.objective_end)} "
            f"{rec.inlier_count} {_fmt(rec.max_pose_update)}"
        )
    for (i, j), err, post, lab in zip(
        report.pairs, report.errors, report.posteriors, report.labels
    ):
        out.append(f"LOOP {i} {j} {_fmt(err)} {_fmt(post)} {1 if lab else 0}")
    for name in sorted(report.metrics):
        out.append(f"METRIC {name} {_fmt(report.metrics[name])}")
    return "\n".join(out) + "\n"


def parse_report_labels(text: str) -> dict[tuple[int, int], bool]:
    """Predicted labels from a report's LOOP rows."""
    out: dict[tuple[int, int], bool] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0] != "LOOP":
            continue
        if len(parts) != 6 or parts[5] not in ("0", "1"):
            raise ParseError(no, "malformed LOOP report row")
        out[(_int(parts[1], no), _int(parts[2], no))] = parts[5] == "1"
    return out
