"""Synthetic ground truth: scripted skeleton motion plus a controllable
per-part scattering process with known rates, positions and path identities.

The animator keeps moving segments rigid (forearms rotate about the elbow),
so finite-difference keypoint velocities, the rigid-body angular velocity
reconstruction and analytic wrist kinematics all agree to numerical
precision.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .fileio import atomic_write_text, fmt_float, iter_data_lines, version_header
from .nnkit import make_rng
from .scatter_geom import MpcEstimate, RfConfig, ScatteringPoint, point_to_mpc
from .skeleton import (
    BODY_PART_GEOMETRY,
    BodyPart,
    GestureSequence,
    KeypointId,
    N_KEYPOINTS,
    SkeletonFrame,
    local_frame,
    part_axis,
    point_to_part_distance,
    sequence_velocities,
)

_K = KeypointId

PRIMITIVES = ("up", "down", "left", "right", "static")

# Seated template, meters, transceiver at the origin at shoulder height,
# subject on the +x axis facing the transceiver. Left-side keypoints sit at
# negative y.
_TEMPLATE = {
    _K.NOSE: (2.42, 0.0, 0.28),
    _K.LEFT_EYE: (2.44, -0.035, 0.33),
    _K.RIGHT_EYE: (2.44, 0.035, 0.33),
    _K.LEFT_EAR: (2.50, -0.075, 0.30),
    _K.RIGHT_EAR: (2.50, 0.075, 0.30),
    _K.LEFT_SHOULDER: (2.50, -0.21, 0.0),
    _K.RIGHT_SHOULDER: (2.50, 0.21, 0.0),
    _K.LEFT_ELBOW: (2.22, -0.21, 0.0),
    _K.RIGHT_ELBOW: (2.22, 0.21, 0.0),
    _K.LEFT_WRIST: (1.95, -0.21, 0.0),
    _K.RIGHT_WRIST: (1.95, 0.21, 0.0),
    _K.LEFT_HIP: (2.52, -0.16, -0.45),
    _K.RIGHT_HIP: (2.52, 0.16, -0.45),
    _K.LEFT_KNEE: (2.12, -0.17, -0.48),
    _K.RIGHT_KNEE: (2.12, 0.17, -0.48),
    _K.LEFT_ANKLE: (2.12, -0.17, -0.95),
    _K.RIGHT_ANKLE: (2.12, 0.17, -0.95),
    _K.CHEST: (2.52, 0.0, -0.06),
    _K.BELLY: (2.53, 0.0, -0.30),
}

# Rotation axis per primitive for a forearm pivoting at the elbow.
_PRIMITIVE_AXES = {
    "up": np.array([0.0, 1.0, 0.0]),
    "down": np.array([0.0, -1.0, 0.0]),
    "left": np.array([0.0, 0.0, 1.0]),
    "right": np.array([0.0, 0.0, -1.0]),
}


@dataclass
class GestureScript:
    """A two-arm gesture: one motion primitive per forearm."""

    left: str = "up"
    right: str = "up"
    amplitude_m: float = 0.3
    period_s: float = 1.95
    duration_s: float = 3.9
    interval_s: float = 0.0026
    subject_scale: float = 1.0
    subject: str = "s0"
    gesture: str = ""

    def __post_init__(self):
        for prim in (self.left, self.right):
            if prim not in PRIMITIVES:
                raise ValueError(f"unknown primitive {prim!r}")
        if self.amplitude_m < 0 or self.period_s <= 0 or self.interval_s <= 0:
            raise ValueError("invalid script timing")
        if self.duration_s < self.interval_s:
            raise ValueError("duration shorter than one snapshot")
        if not self.gesture:
            self.gesture = f"{self.left}-{self.right}"

    @property
    def n_snapshots(self) -> int:
        return int(round(self.duration_s / self.interval_s))


def _rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    kx, ky, kz = axis
    k_cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + math.sin(angle) * k_cross + (1.0 - math.cos(angle)) * (k_cross @ k_cross)


def _max_angle(script: GestureScript, forearm_len: float) -> float:
    # amplitude is the peak wrist chord displacement
    half = script.amplitude_m / (2.0 * forearm_len)
    if half > 1.0:
        raise ValueError("amplitude exceeds forearm reach")
    return 2.0 * math.asin(half)


def _profile_angle(script: GestureScript, t: float, theta_max: float) -> float:
    return theta_max * 0.5 * (1.0 - math.cos(2.0 * math.pi * t / script.period_s))


def _profile_rate(script: GestureScript, t: float, theta_max: float) -> float:
    return theta_max * (math.pi / script.period_s) * math.sin(2.0 * math.pi * t / script.period_s)


def template_positions(scale: float = 1.0) -> np.ndarray:
    pos = np.zeros((N_KEYPOINTS, 3))
    for kp, xyz in _TEMPLATE.items():
        pos[int(kp)] = xyz
    if scale != 1.0:
        center = pos[int(_K.BELLY)].copy()
        pos = center + scale * (pos - center)
    return pos


def animate(script: GestureScript) -> GestureSequence:
    """Render the script to a uniformly sampled keypoint sequence."""
    rest = template_positions(script.subject_scale)
    n = script.n_snapshots
    frames = []
    sides = (
        ("left", _K.LEFT_ELBOW, _K.LEFT_WRIST, script.left),
        ("right", _K.RIGHT_ELBOW, _K.RIGHT_WRIST, script.right),
    )
    for i in range(n):
        t = i * script.interval_s
        pos = rest.copy()
        for _, elbow, wrist, prim in sides:
            if prim == "static":
                continue
            u0 = rest[int(wrist)] - rest[int(elbow)]
            theta_max = _max_angle(script, float(np.linalg.norm(u0)))
            theta = _profile_angle(script, t, theta_max)
            rot = _rotation_about(_PRIMITIVE_AXES[prim], theta)
            pos[int(wrist)] = rest[int(elbow)] + rot @ u0
        frames.append(SkeletonFrame(t, pos))
    return GestureSequence(frames, subject=script.subject, gesture=script.gesture)


def analytic_wrist_state(script: GestureScript, side: str, t: float):
    """Closed-form wrist position and velocity for a moving forearm."""
    rest = template_positions(script.subject_scale)
    elbow = _K.LEFT_ELBOW if side == "left" else _K.RIGHT_ELBOW
    wrist = _K.LEFT_WRIST if side == "left" else _K.RIGHT_WRIST
    prim = script.left if side == "left" else script.right
    e = rest[int(elbow)]
    u0 = rest[int(wrist)] - e
    if prim == "static":
        return rest[int(wrist)].copy(), np.zeros(3)
    axis = _PRIMITIVE_AXES[prim]
    theta_max = _max_angle(script, float(np.linalg.norm(u0)))
    theta = _profile_angle(script, t, theta_max)
    rate = _profile_rate(script, t, theta_max)
    u = _rotation_about(axis, theta) @ u0
    return e + u, rate * np.cross(axis, u)


@dataclass
class ScatterProcessConfig:
    """Controls the synthetic per-part scattering point process."""

    base_rates: Dict[BodyPart, float] = None
    motion_gain_s_per_m: float = 2.0
    jitter_std_m: float = 0.03
    rcs_log10_mean: Dict[BodyPart, float] = None
    rcs_log10_std: float = 0.25
    placement_margin: float = 0.12
    path_lifetime_s: float = 0.1
    noise_delay_ns: float = 0.0
    noise_angle_deg: float = 0.0
    noise_amplitude_db: float = 0.0

    def __post_init__(self):
        if self.base_rates is None:
            self.base_rates = {
                BodyPart.FOREARM_L: 1.0,
                BodyPart.FOREARM_R: 1.0,
                BodyPart.UPPER_ARM_L: 0.8,
                BodyPart.UPPER_ARM_R: 0.8,
                BodyPart.HEAD: 0.6,
                BodyPart.TORSO: 1.2,
            }
        if self.rcs_log10_mean is None:
            self.rcs_log10_mean = {
                BodyPart.FOREARM_L: -1.6,
                BodyPart.FOREARM_R: -1.6,
                BodyPart.UPPER_ARM_L: -1.6,
                BodyPart.UPPER_ARM_R: -1.6,
                BodyPart.HEAD: -1.5,
                BodyPart.TORSO: -1.2,
            }
        for part in BodyPart:
            if self.base_rates.get(part, 0.0) < 0:
                raise ValueError("negative base rate")
        if not 0.0 <= self.placement_margin < 0.5:
            raise ValueError("placement margin must be in [0, 0.5)")
        if self.path_lifetime_s < 0:
            raise ValueError("negative path lifetime")


@dataclass
class _TruthPath:
    path_id: int
    part: BodyPart
    segment: int
    fraction: float
    offset_local: np.ndarray
    rcs_m2: float


@dataclass
class ScatterTruth:
    """Ground-truth scattering process output for one sequence."""

    points_by_snapshot: List[List[ScatteringPoint]]
    rates: np.ndarray   # (n, 6) true lambda per part
    counts: np.ndarray  # (n, 6) realized counts per part

    @property
    def n_snapshots(self) -> int:
        return len(self.points_by_snapshot)

    def all_points(self):
        return [p for pts in self.points_by_snapshot for p in pts]


def _poisson_knuth(lam: float, rng) -> int:
    limit = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


def _sample_count(lam: float, rng) -> int:
    if lam <= 0.0:
        return 0
    if lam < 30.0:
        return _poisson_knuth(lam, rng)
    while True:
        k = math.floor(lam + math.sqrt(lam) * rng.standard_normal() + 0.5)
        if k >= 0:
            return int(k)


def _segment_lengths(part: BodyPart, positions: np.ndarray) -> np.ndarray:
    geo = BODY_PART_GEOMETRY[part]
    return np.array(
        [np.linalg.norm(positions[int(kb)] - positions[int(ka)]) for ka, kb in geo.segments]
    )


_BIRTH_SEPARATION = 1.45
_BIRTH_ATTEMPTS = 40


def _draw_birth_placement(part, frame, frame_r, rest_positions, cfg, rng):
    """Draw (segment, fraction, local offset) for a newborn path.

    Candidates are redrawn until the placed point is nearest to its own
    part by a comfortable factor, so downstream labeling by geometry is
    unambiguous. Falls back to the last candidate if no draw qualifies.
    """
    geo = BODY_PART_GEOMETRY[part]
    lengths = _segment_lengths(part, rest_positions)
    weights = lengths / lengths.sum()
    lo, hi = cfg.placement_margin, 1.0 - cfg.placement_margin
    for _ in range(_BIRTH_ATTEMPTS):
        seg = int(rng.choice(len(lengths), p=weights))
        frac = float(rng.uniform(lo, hi))
        offset = rng.normal(0.0, cfg.jitter_std_m, size=3)
        ka, kb = geo.segments[seg]
        a = frame.positions[int(ka)]
        b = frame.positions[int(kb)]
        pos = a + frac * (b - a) + frame_r.rotation @ offset
        d_own = point_to_part_distance(pos, part, frame)
        d_other = min(
            point_to_part_distance(pos, other, frame) for other in BodyPart if other != part
        )
        if d_own * _BIRTH_SEPARATION <= d_other:
            break
    return seg, frac, offset


def sample_scatter_truth(
    seq: GestureSequence,
    cfg: ScatterProcessConfig,
    rng,
    rf: Optional[RfConfig] = None,
) -> ScatterTruth:
    """Draw a persistent-path scattering process driven by segment motion.

    Per part j the snapshot count is Poisson(lambda_j(t)) with
    lambda_j(t) = base_j * (1 + gain * |axis midpoint velocity|). Paths
    evolve as an immigration-death chain: each survives a snapshot with
    probability q_t = min(exp(-dt/lifetime), lambda_t/lambda_{t-1}) and
    Poisson(lambda_t - q_t lambda_{t-1}) new paths are born, which keeps
    the per-snapshot marginal exactly Poisson while giving paths a mean
    lifetime on the order of ``path_lifetime_s``. A path keeps a fixed
    segment fraction and a fixed part-local offset, so it rides rigidly on
    the moving part.

    Birth placements are rejection-sampled so the new point sits clearly
    nearest to its own part (by a 1.45x separation factor against every
    other part) at the birth frame; the offset is frame-rigid, so that
    unambiguous parenthood persists for the life of the path.
    """
    rf = rf or RfConfig()
    n = len(seq.frames)
    vel = sequence_velocities(seq, smooth_window=0) if n >= 2 else np.zeros((n, N_KEYPOINTS, 3))
    dt = seq.frame_interval() if n > 1 else 0.0
    survive_base = math.exp(-dt / cfg.path_lifetime_s) if cfg.path_lifetime_s > 0 and dt > 0 else 0.0
    rest_positions = seq.frames[0].positions
    rates = np.zeros((n, len(BodyPart)))
    counts = np.zeros((n, len(BodyPart)), dtype=int)
    points_by_snapshot: List[List[ScatteringPoint]] = [[] for _ in range(n)]
    alive: Dict[BodyPart, List[_TruthPath]] = {part: [] for part in BodyPart}
    prev_rate: Dict[BodyPart, float] = {part: 0.0 for part in BodyPart}
    prev_gamma: Dict[BodyPart, np.ndarray] = {}
    next_id = 0

    for t in range(n):
        frame = seq.frames[t]
        for part in BodyPart:
            geo = BODY_PART_GEOMETRY[part]
            a_ids = [int(k) for k in geo.axis_a]
            b_ids = [int(k) for k in geo.axis_b]
            v_mid = 0.5 * (vel[t][a_ids].mean(axis=0) + vel[t][b_ids].mean(axis=0))
            lam = cfg.base_rates.get(part, 0.0) * (
                1.0 + cfg.motion_gain_s_per_m * float(np.linalg.norm(v_mid))
            )
            rates[t, int(part)] = lam

            paths = alive[part]
            if t == 0 or prev_rate[part] <= 0.0:
                q = 0.0
            else:
                q = min(survive_base, lam / prev_rate[part])
            paths[:] = [p for p in paths if rng.random() < q]
            births = _sample_count(max(lam - q * prev_rate[part], 0.0), rng)
            prev_rate[part] = lam
            frame_r = local_frame(frame, part, rf.tx_position, fallback_gamma=prev_gamma.get(part))
            prev_gamma[part] = frame_r.gamma
            for _ in range(births):
                seg, frac, offset = _draw_birth_placement(part, frame, frame_r, rest_positions, cfg, rng)
                log_rcs = rng.normal(cfg.rcs_log10_mean[part], cfg.rcs_log10_std)
                paths.append(
                    _TruthPath(
                        path_id=next_id,
                        part=part,
                        segment=seg,
                        fraction=frac,
                        offset_local=offset,
                        rcs_m2=float(10.0**log_rcs),
                    )
                )
                next_id += 1
            counts[t, int(part)] = len(paths)

            if not paths:
                continue
            for path in paths:
                ka, kb = geo.segments[path.segment]
                a = frame.positions[int(ka)]
                b = frame.positions[int(kb)]
                base = a + path.fraction * (b - a)
                pos = base + frame_r.rotation @ path.offset_local
                points_by_snapshot[t].append(
                    ScatteringPoint(
                        position=pos,
                        rcs_m2=path.rcs_m2,
                        snapshot=t,
                        part=part,
                        path_id=path.path_id,
                    )
                )
    return ScatterTruth(points_by_snapshot=points_by_snapshot, rates=rates, counts=counts)


def export_as_mpc(truth: ScatterTruth, rf: RfConfig, cfg: ScatterProcessConfig, rng) -> List[MpcEstimate]:
    """Convert truth points to MPC estimates, optionally with estimator noise."""
    noisy = cfg.noise_delay_ns > 0 or cfg.noise_angle_deg > 0 or cfg.noise_amplitude_db > 0
    out = []
    for pts in truth.points_by_snapshot:
        for p in pts:
            est = point_to_mpc(p, rf)
            if noisy:
                delay = est.delay_s + rng.normal(0.0, cfg.noise_delay_ns) * 1e-9
                az = est.azimuth_rad + math.radians(rng.normal(0.0, cfg.noise_angle_deg))
                el = est.elevation_rad + math.radians(rng.normal(0.0, cfg.noise_angle_deg))
                el = max(-math.pi / 2, min(math.pi / 2, el))
                amp = est.amplitude * 10.0 ** (rng.normal(0.0, cfg.noise_amplitude_db) / 20.0)
                est = MpcEstimate(
                    delay_s=max(delay, 1e-12),
                    azimuth_rad=az,
                    elevation_rad=el,
                    amplitude=amp,
                    snapshot=p.snapshot,
                )
            out.append(est)
    return out


TRUTH_RATES_FIELDS = ["snapshot", "part", "lambda_true", "count_true"]
TRUTH_POINTS_FIELDS = ["snapshot", "path_id_true", "part", "x", "y", "z", "rcs_m2"]


def write_truth_rates_csv(path, truth: ScatterTruth) -> None:
    buf = io.StringIO()
    buf.write(version_header())
    writer = csv.writer(buf)
    writer.writerow(TRUTH_RATES_FIELDS)
    for t in range(truth.n_snapshots):
        for part in BodyPart:
            writer.writerow(
                [
                    str(t),
                    part.tag,
                    fmt_float(truth.rates[t, int(part)]),
                    str(int(truth.counts[t, int(part)])),
                ]
            )
    atomic_write_text(path, buf.getvalue())


def read_truth_rates_csv(path):
    """Returns (rates, counts) arrays of shape (n_snapshots, n_parts)."""
    rows = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(iter_data_lines(fh))
        header = next(reader)
        if header != TRUTH_RATES_FIELDS:
            raise ValueError(f"{path}: unexpected truth rates header")
        for row in reader:
            rows.append((int(row[0]), BodyPart.from_tag(row[1]), float(row[2]), int(row[3])))
    n = 1 + max(r[0] for r in rows)
    rates = np.zeros((n, len(BodyPart)))
    counts = np.zeros((n, len(BodyPart)), dtype=int)
    for snap, part, lam, k in rows:
        rates[snap, int(part)] = lam
        counts[snap, int(part)] = k
    return rates, counts


def write_truth_points_csv(path, truth: ScatterTruth) -> None:
    buf = io.StringIO()
    buf.write(version_header())
    writer = csv.writer(buf)
    writer.writerow(TRUTH_POINTS_FIELDS)
    for pts in truth.points_by_snapshot:
        for p in pts:
            writer.writerow(
                [
                    str(int(p.snapshot)),
                    str(int(p.path_id)),
                    p.part.tag,
                    fmt_float(p.position[0]),
                    fmt_float(p.position[1]),
                    fmt_float(p.position[2]),
                    fmt_float(p.rcs_m2),
                ]
            )
    atomic_write_text(path, buf.getvalue())


def read_truth_points_csv(path):
    points = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(iter_data_lines(fh))
        header = next(reader)
        if header != TRUTH_POINTS_FIELDS:
            raise ValueError(f"{path}: unexpected truth points header")
        for row in reader:
            points.append(
                ScatteringPoint(
                    position=np.array([float(row[3]), float(row[4]), float(row[5])]),
                    rcs_m2=float(row[6]),
                    snapshot=int(row[0]),
                    part=BodyPart.from_tag(row[2]),
                    path_id=int(row[1]),
                )
            )
    return points
