"""Temporal association of scattering points into trajectories and semantic
labeling of trajectories by body part.

Tracking is greedy nearest-neighbor: candidate matches between consecutive
snapshots are consumed globally smallest distance first, one-to-one, within
a gate. Labels minimize the mean point-to-part distance over a trajectory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .fileio import atomic_write_text, fmt_float, iter_data_lines, version_header
from .scatter_geom import ScatteringPoint
from .skeleton import BodyPart, SkeletonFrame, point_to_part_distance, min_part_distance


@dataclass
class TrackerConfig:
    gate_distance_m: float = 0.15
    outlier_threshold_m: float = 0.25
    filter_before_tracking: bool = True

    def __post_init__(self):
        if self.gate_distance_m <= 0 or self.outlier_threshold_m <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class Trajectory:
    """A tracked path: one point per consecutive snapshot."""

    path_id: int
    points: List[ScatteringPoint] = field(default_factory=list)
    label: Optional[BodyPart] = None

    @property
    def snapshots(self):
        return [p.snapshot for p in self.points]

    def __len__(self):
        return len(self.points)


def _frame_at(frames, snapshot: int) -> SkeletonFrame:
    if isinstance(frames, SkeletonFrame):
        return frames
    seq = getattr(frames, "frames", frames)
    if not 0 <= snapshot < len(seq):
        raise ValueError(f"no skeleton frame for snapshot {snapshot}")
    return seq[snapshot]


def filter_outliers(points, frames, cfg: TrackerConfig):
    """Drop points farther than the outlier threshold from every body part."""
    kept = []
    for p in points:
        frame = _frame_at(frames, p.snapshot)
        d, _ = min_part_distance(p.position, frame)
        if d <= cfg.outlier_threshold_m:
            kept.append(p)
    return kept


def track_paths(points_by_snapshot, cfg: TrackerConfig) -> List[Trajectory]:
    """Associate per-snapshot points into trajectories.

    ``points_by_snapshot[i]`` holds the points of snapshot i (indices must be
    contiguous). A point extends the trajectory whose latest point is nearest,
    if within the gate; distance ties break on coordinates so the result does
    not depend on input ordering beyond path-id assignment.
    """
    trajectories: List[Trajectory] = []
    active: List[Trajectory] = []
    next_id = 0
    for pts in points_by_snapshot:
        pts = list(pts)
        candidates = []
        for i, tr in enumerate(active):
            prev = tr.points[-1].position
            for j, p in enumerate(pts):
                d = float(np.linalg.norm(p.position - prev))
                if d <= cfg.gate_distance_m:
                    candidates.append((d, tuple(prev), tuple(p.position), i, j))
        candidates.sort(key=lambda c: c[:3])
        used_tr = set()
        used_pt = set()
        survivors = []
        for d, _, _, i, j in candidates:
            if i in used_tr or j in used_pt:
                continue
            used_tr.add(i)
            used_pt.add(j)
            active[i].points.append(pts[j])
            survivors.append(active[i])
        births = [j for j in range(len(pts)) if j not in used_pt]
        births.sort(key=lambda j: tuple(pts[j].position))
        for j in births:
            tr = Trajectory(path_id=next_id, points=[pts[j]])
            next_id += 1
            trajectories.append(tr)
            survivors.append(tr)
        active = survivors
    return trajectories


def label_trajectory(traj: Trajectory, frames) -> BodyPart:
    """Assign the part with the smallest mean point-to-part distance.

    Ties resolve to the lowest part code.
    """
    if not traj.points:
        raise ValueError("empty trajectory")
    means = np.zeros(len(BodyPart))
    for p in traj.points:
        frame = _frame_at(frames, p.snapshot)
        for part in BodyPart:
            means[int(part)] += point_to_part_distance(p.position, part, frame)
    means /= len(traj.points)
    return BodyPart(int(np.argmin(means)))


def label_all(trajectories, frames):
    """Label every trajectory in place and stamp points with part/path_id."""
    for tr in trajectories:
        tr.label = label_trajectory(tr, frames)
        for p in tr.points:
            p.part = tr.label
            p.path_id = tr.path_id
    return trajectories


def points_from_trajectories(trajectories, n_snapshots: int):
    """Flatten labeled trajectories back to per-snapshot point lists."""
    out = [[] for _ in range(n_snapshots)]
    for tr in trajectories:
        for p in tr.points:
            out[p.snapshot].append(p)
    return out


LABELED_CSV_FIELDS = ["snapshot", "path_id", "part", "x", "y", "z", "rcs_m2"]


def write_labeled_csv(path, points) -> None:
    """Write scattering points; unlabeled points carry path_id -1, empty part."""
    buf = io.StringIO()
    buf.write(version_header())
    writer = csv.writer(buf)
    writer.writerow(LABELED_CSV_FIELDS)
    for p in points:
        writer.writerow(
            [
                str(int(p.snapshot)),
                str(-1 if p.path_id is None else int(p.path_id)),
                "" if p.part is None else p.part.tag,
                fmt_float(p.position[0]),
                fmt_float(p.position[1]),
                fmt_float(p.position[2]),
                fmt_float(p.rcs_m2),
            ]
        )
    atomic_write_text(path, buf.getvalue())


def read_labeled_csv(path):
    points = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(iter_data_lines(fh))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty points file") from None
        if header != LABELED_CSV_FIELDS:
            raise ValueError(f"{path}: unexpected points CSV header")
        for row in reader:
            if len(row) != len(LABELED_CSV_FIELDS):
                raise ValueError(f"{path}: malformed points row")
            pid = int(row[1])
            points.append(
                ScatteringPoint(
                    position=np.array([float(row[3]), float(row[4]), float(row[5])]),
                    rcs_m2=float(row[6]),
                    snapshot=int(row[0]),
                    part=BodyPart.from_tag(row[2]) if row[2] else None,
                    path_id=None if pid < 0 else pid,
                )
            )
    return points


def points_by_snapshot(points, n_snapshots: Optional[int] = None):
    """Group a flat point list by snapshot index into a dense list of lists."""
    if n_snapshots is None:
        n_snapshots = 1 + max((p.snapshot for p in points), default=-1)
    out = [[] for _ in range(n_snapshots)]
    for p in points:
        if not 0 <= p.snapshot < n_snapshots:
            raise ValueError(f"snapshot {p.snapshot} out of range")
        out[p.snapshot].append(p)
    return out
