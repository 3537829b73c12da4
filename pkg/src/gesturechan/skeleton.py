"""Keypoint skeletons: data model, alignment, interpolation, body-part
segment geometry and per-part local coordinate frames.

Positions are meters in a global right-handed frame whose origin is the
collocated transceiver, z up. Keypoint codes are stable and define the
column order of the keypoint CSV format.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .fileio import atomic_write_text, fmt_float, iter_data_lines, version_header

N_KEYPOINTS = 19


class KeypointId(IntEnum):
    NOSE = 0
    LEFT_EYE = 1
    RIGHT_EYE = 2
    LEFT_EAR = 3
    RIGHT_EAR = 4
    LEFT_SHOULDER = 5
    RIGHT_SHOULDER = 6
    LEFT_ELBOW = 7
    RIGHT_ELBOW = 8
    LEFT_WRIST = 9
    RIGHT_WRIST = 10
    LEFT_HIP = 11
    RIGHT_HIP = 12
    LEFT_KNEE = 13
    RIGHT_KNEE = 14
    LEFT_ANKLE = 15
    RIGHT_ANKLE = 16
    CHEST = 17
    BELLY = 18


class BodyPart(IntEnum):
    """Body parts that carry scattering points; codes break label ties."""

    FOREARM_L = 0
    FOREARM_R = 1
    UPPER_ARM_L = 2
    UPPER_ARM_R = 3
    HEAD = 4
    TORSO = 5

    @property
    def tag(self) -> str:
        return self.name.lower()

    @classmethod
    def from_tag(cls, tag: str) -> "BodyPart":
        try:
            return cls[tag.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown body part tag {tag!r}") from None


_K = KeypointId


@dataclass(frozen=True)
class BodyPartGeometry:
    """Segment set of a part plus the two keypoint groups spanning its axis.

    Axis endpoints are the mean position of the listed keypoints, which lets
    the head use the ear midpoint as a virtual axis origin.
    """

    part: BodyPart
    segments: tuple
    axis_a: tuple
    axis_b: tuple


BODY_PART_GEOMETRY = {
    BodyPart.FOREARM_L: BodyPartGeometry(
        BodyPart.FOREARM_L,
        ((_K.LEFT_ELBOW, _K.LEFT_WRIST),),
        (_K.LEFT_ELBOW,),
        (_K.LEFT_WRIST,),
    ),
    BodyPart.FOREARM_R: BodyPartGeometry(
        BodyPart.FOREARM_R,
        ((_K.RIGHT_ELBOW, _K.RIGHT_WRIST),),
        (_K.RIGHT_ELBOW,),
        (_K.RIGHT_WRIST,),
    ),
    BodyPart.UPPER_ARM_L: BodyPartGeometry(
        BodyPart.UPPER_ARM_L,
        ((_K.LEFT_SHOULDER, _K.LEFT_ELBOW),),
        (_K.LEFT_SHOULDER,),
        (_K.LEFT_ELBOW,),
    ),
    BodyPart.UPPER_ARM_R: BodyPartGeometry(
        BodyPart.UPPER_ARM_R,
        ((_K.RIGHT_SHOULDER, _K.RIGHT_ELBOW),),
        (_K.RIGHT_SHOULDER,),
        (_K.RIGHT_ELBOW,),
    ),
    BodyPart.HEAD: BodyPartGeometry(
        BodyPart.HEAD,
        (
            (_K.NOSE, _K.LEFT_EYE),
            (_K.NOSE, _K.RIGHT_EYE),
            (_K.LEFT_EYE, _K.LEFT_EAR),
            (_K.RIGHT_EYE, _K.RIGHT_EAR),
            (_K.LEFT_EAR, _K.RIGHT_EAR),
        ),
        (_K.LEFT_EAR, _K.RIGHT_EAR),
        (_K.NOSE,),
    ),
    BodyPart.TORSO: BodyPartGeometry(
        BodyPart.TORSO,
        (
            (_K.LEFT_SHOULDER, _K.RIGHT_SHOULDER),
            (_K.LEFT_SHOULDER, _K.LEFT_HIP),
            (_K.RIGHT_SHOULDER, _K.RIGHT_HIP),
            (_K.LEFT_HIP, _K.RIGHT_HIP),
            (_K.CHEST, _K.BELLY),
        ),
        (_K.BELLY,),
        (_K.CHEST,),
    ),
}


@dataclass
class SkeletonFrame:
    """One time-stamped pose: 19 keypoint positions in meters."""

    time: float
    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.shape != (N_KEYPOINTS, 3):
            raise ValueError(f"expected ({N_KEYPOINTS}, 3) positions, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite keypoint coordinates")
        self.time = float(self.time)
        if self.time < 0:
            raise ValueError("negative frame time")
        self.positions = pos

    def keypoint(self, kp: KeypointId) -> np.ndarray:
        return self.positions[int(kp)]

    def translated(self, offset) -> "SkeletonFrame":
        return SkeletonFrame(self.time, self.positions + np.asarray(offset, dtype=float))


@dataclass
class GestureSequence:
    """Frames of one gesture recording, strictly increasing in time."""

    frames: list
    subject: str = "s0"
    gesture: str = ""

    def __post_init__(self):
        self.frames = list(self.frames)
        times = np.array([f.time for f in self.frames], dtype=float)
        if len(times) >= 2 and not np.all(np.diff(times) > 0):
            raise ValueError("frame times must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames], dtype=float)

    def stacked_positions(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames])

    def frame_interval(self) -> float:
        """Uniform sampling interval; raises on non-uniform sequences."""
        if len(self.frames) < 2:
            raise ValueError("insufficient frames")
        dt = np.diff(self.times)
        if not np.allclose(dt, dt[0], rtol=1e-6, atol=1e-9):
            raise ValueError("non-uniform frame sampling")
        return float(dt[0])


def part_axis(frame: SkeletonFrame, part: BodyPart):
    """Axis endpoints (A, B) of a part; A may be a virtual midpoint."""
    geo = BODY_PART_GEOMETRY[part]
    a = frame.positions[[int(k) for k in geo.axis_a]].mean(axis=0)
    b = frame.positions[[int(k) for k in geo.axis_b]].mean(axis=0)
    return a, b


def _segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-24:
        return float(np.linalg.norm(p - a))
    t = float((p - a) @ ab) / denom
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))


def point_to_part_distance(point, part: BodyPart, frame: SkeletonFrame) -> float:
    """Distance from a point to the nearest segment of a body part."""
    p = np.asarray(point, dtype=float)
    geo = BODY_PART_GEOMETRY[part]
    return min(
        _segment_distance(p, frame.positions[int(ka)], frame.positions[int(kb)])
        for ka, kb in geo.segments
    )


def min_part_distance(point, frame: SkeletonFrame):
    """Smallest point-to-part distance over all parts, with its argmin part."""
    best_part = None
    best = np.inf
    for part in BodyPart:
        d = point_to_part_distance(point, part, frame)
        if d < best:
            best = d
            best_part = part
    return best, best_part


@dataclass
class LocalFrame:
    """Right-handed orthonormal part frame; columns of R are (zeta, beta, gamma).

    zeta points along the part axis A->B, gamma is the transverse component
    of the transceiver direction, beta completes the triad.
    """

    origin: np.ndarray
    rotation: np.ndarray

    @property
    def zeta(self):
        return self.rotation[:, 0]

    @property
    def beta(self):
        return self.rotation[:, 1]

    @property
    def gamma(self):
        return self.rotation[:, 2]

    def to_local(self, point) -> np.ndarray:
        p = np.asarray(point, dtype=float)
        return (p - self.origin) @ self.rotation

    def to_global(self, local) -> np.ndarray:
        q = np.asarray(local, dtype=float)
        return self.origin + q @ self.rotation.T


def _unit(v, err: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n <= 1e-6:
        raise ValueError(err)
    return v / n


def local_frame(frame: SkeletonFrame, part: BodyPart, tx_position, fallback_gamma=None) -> LocalFrame:
    """Build the part-local frame anchored at axis endpoint A.

    gamma is derived from the direction to the transceiver; when that
    direction is (numerically) parallel to the axis, ``fallback_gamma``
    seeds the transverse direction instead.
    """
    a, b = part_axis(frame, part)
    zeta = _unit(b - a, "degenerate axis")
    tx = np.asarray(tx_position, dtype=float)
    to_tx = tx - a
    transverse = to_tx - (to_tx @ zeta) * zeta
    if np.linalg.norm(transverse) <= 1e-6:
        if fallback_gamma is None:
            raise ValueError("singular frame")
        fb = np.asarray(fallback_gamma, dtype=float)
        transverse = fb - (fb @ zeta) * zeta
        if np.linalg.norm(transverse) <= 1e-6:
            raise ValueError("singular frame")
    gamma = transverse / np.linalg.norm(transverse)
    beta = np.cross(gamma, zeta)
    rotation = np.column_stack([zeta, beta, gamma])
    return LocalFrame(origin=a.copy(), rotation=rotation)


def align_to_reference(frame: SkeletonFrame, reference) -> SkeletonFrame:
    """Translate a frame so its belly keypoint sits at ``reference``."""
    ref = np.asarray(reference, dtype=float)
    return frame.translated(ref - frame.keypoint(KeypointId.BELLY))


def align_sequence(seq: GestureSequence, reference=None) -> GestureSequence:
    """Translate all frames by one shared offset anchored at the first belly.

    The first frame's belly lands on ``reference`` (origin by default);
    using a single offset (rather than re-centering every frame) keeps
    inter-frame motion intact, so gross torso translation still shows up
    in velocities.
    """
    if not seq.frames:
        raise ValueError("insufficient frames")
    first_belly = seq.frames[0].keypoint(KeypointId.BELLY)
    ref = np.zeros(3) if reference is None else np.asarray(reference, dtype=float)
    offset = ref - first_belly
    frames = [f.translated(offset) for f in seq.frames]
    return GestureSequence(frames, subject=seq.subject, gesture=seq.gesture)


def interpolate_sequence(seq: GestureSequence, target_interval: float) -> GestureSequence:
    """Resample to a uniform grid spanning [first, last] by linear interpolation."""
    if target_interval <= 0:
        raise ValueError("non-positive interval")
    if len(seq.frames) < 2:
        raise ValueError("insufficient frames")
    src_t = seq.times
    t0, t1 = float(src_t[0]), float(src_t[-1])
    n_steps = int(np.floor((t1 - t0) / target_interval + 1e-9))
    times = t0 + np.arange(n_steps + 1) * target_interval
    if abs(times[-1] - t1) <= 1e-9 * max(1.0, abs(t1)):
        times[-1] = t1
    flat = seq.stacked_positions().reshape(len(seq.frames), -1)
    out = np.empty((len(times), flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.interp(times, src_t, flat[:, j])
    out[0] = flat[0]
    if times[-1] == t1:
        out[-1] = flat[-1]
    frames = [SkeletonFrame(t, row.reshape(N_KEYPOINTS, 3)) for t, row in zip(times, out)]
    return GestureSequence(frames, subject=seq.subject, gesture=seq.gesture)


def _centered_moving_average(pos: np.ndarray, window: int) -> np.ndarray:
    """Moving average with symmetric, edge-truncated windows.

    Window half-width shrinks near the ends so every window stays centered;
    this keeps affine-in-time trajectories exactly unchanged.
    """
    n = pos.shape[0]
    half = window // 2
    if half < 1 or n < 3:
        return pos
    csum = np.concatenate([np.zeros((1,) + pos.shape[1:]), np.cumsum(pos, axis=0)])
    idx = np.arange(n)
    h = np.minimum(half, np.minimum(idx, n - 1 - idx))
    tail = (idx + h + 1).astype(int)
    head = (idx - h).astype(int)
    counts = (2 * h + 1).astype(float)
    return (csum[tail] - csum[head]) / counts.reshape((-1,) + (1,) * (pos.ndim - 1))


def sequence_velocities(seq: GestureSequence, smooth_window: int = 5) -> np.ndarray:
    """Per-frame keypoint velocities (n, 19, 3) via finite differences.

    Central differences inside, second-order one-sided at the ends.
    ``smooth_window`` <= 1 disables position smoothing.
    """
    dt = seq.frame_interval()
    pos = seq.stacked_positions()
    if smooth_window and smooth_window > 1:
        pos = _centered_moving_average(pos, smooth_window)
    edge_order = 2 if pos.shape[0] >= 3 else 1
    return np.gradient(pos, dt, axis=0, edge_order=edge_order)


def keypoint_velocities(seq: GestureSequence, t_index: int, smooth_window: int = 5) -> np.ndarray:
    """Velocities (19, 3) of one frame; see ``sequence_velocities``."""
    if not 0 <= t_index < len(seq.frames):
        raise ValueError("t_index out of range")
    return sequence_velocities(seq, smooth_window=smooth_window)[t_index]


KEYPOINT_CSV_FIELDS = ["time_s", "subject", "gesture"] + [
    f"kp{i:02d}_{ax}" for i in range(N_KEYPOINTS) for ax in ("x", "y", "z")
]


def write_keypoints_csv(path, seq: GestureSequence) -> None:
    buf = io.StringIO()
    buf.write(version_header())
    writer = csv.writer(buf)
    writer.writerow(KEYPOINT_CSV_FIELDS)
    for f in seq.frames:
        row = [fmt_float(f.time), seq.subject, seq.gesture]
        row.extend(fmt_float(v) for v in f.positions.reshape(-1))
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_keypoints_csv(path) -> GestureSequence:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(iter_data_lines(fh))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty keypoint file") from None
        if header != KEYPOINT_CSV_FIELDS:
            raise ValueError(f"{path}: unexpected keypoint CSV header")
        frames = []
        subject, gesture = "s0", ""
        for row in reader:
            if len(row) != len(KEYPOINT_CSV_FIELDS):
                raise ValueError(f"{path}: malformed keypoint row")
            subject, gesture = row[1], row[2]
            coords = np.array([float(v) for v in row[3:]], dtype=float)
            frames.append(SkeletonFrame(float(row[0]), coords.reshape(N_KEYPOINTS, 3)))
    return GestureSequence(frames, subject=subject, gesture=gesture)
