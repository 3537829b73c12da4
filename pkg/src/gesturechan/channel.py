"""Channel synthesis from scattering points.

Each snapshot turns labeled points into path samples (delay, power gain,
Doppler, phase); sequences of snapshots feed power delay profiles, delay
spreads, instantaneous Doppler spectra and slow-time STFT spectrograms.

Phase model: every tracked path gets one uniform initial phase, then the
phase advances by 2*pi*doppler*dt per snapshot and is stored wrapped to
[-pi, pi). Untracked points (path_id None) draw a fresh phase each
snapshot and never accumulate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .fileio import atomic_write_text, fmt_float, version_header
from .scatter_geom import RfConfig, ScatteringPoint, amplitude_from_rcs
from .skeleton import (
    BODY_PART_GEOMETRY,
    BodyPart,
    GestureSequence,
    SkeletonFrame,
    sequence_velocities,
)

TWO_PI = 2.0 * math.pi


@dataclass
class PathSample:
    """One propagation path at one instant; ``gain`` is |alpha|^2 (linear)."""

    delay_s: float
    gain: float
    doppler_hz: float
    phase_rad: float
    part: BodyPart
    snapshot: int
    path_id: Optional[int] = None

    def __post_init__(self):
        if self.delay_s <= 0:
            raise ValueError("non-positive delay")
        if self.gain < 0:
            raise ValueError("negative gain")
        if not (-math.pi <= self.phase_rad < math.pi):
            raise ValueError("phase outside [-pi, pi)")


@dataclass
class ChannelSnapshot:
    time_s: float
    paths: List[PathSample] = field(default_factory=list)

    def __len__(self):
        return len(self.paths)

    def total_power(self) -> float:
        return float(sum(p.gain for p in self.paths))

    def slow_time_sample(self) -> complex:
        """Coherent sum of path amplitudes at this instant."""
        return complex(
            sum(math.sqrt(p.gain) * complex(math.cos(p.phase_rad), math.sin(p.phase_rad))
                for p in self.paths)
        )


@dataclass
class DelayProfile:
    """Power accumulated on a delay axis (bin lower edges)."""

    delays_s: np.ndarray
    power: np.ndarray
    bin_s: float

    def __post_init__(self):
        self.delays_s = np.asarray(self.delays_s, dtype=float)
        self.power = np.asarray(self.power, dtype=float)
        if self.delays_s.shape != self.power.shape:
            raise ValueError("axis/power length mismatch")
        if np.any(self.power < 0):
            raise ValueError("negative power")

    def total_power(self) -> float:
        return float(self.power.sum())


@dataclass
class Spectrogram:
    times_s: np.ndarray
    doppler_hz: np.ndarray
    power: np.ndarray  # (n_frames, n_doppler)
    window_len: int
    hop: int
    interval_s: float
    window: str = "hann"

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, dtype=float)
        self.doppler_hz = np.asarray(self.doppler_hz, dtype=float)
        self.power = np.asarray(self.power, dtype=float)
        if self.power.shape != (self.times_s.size, self.doppler_hz.size):
            raise ValueError("power matrix does not match axes")


def wrap_phase(phi: float) -> float:
    """Map an angle onto [-pi, pi)."""
    return float((phi + math.pi) % TWO_PI - math.pi)


def path_delay(position, cfg: RfConfig = None) -> float:
    """Round-trip delay 2 d / c0 of a single-bounce path."""
    cfg = cfg or RfConfig()
    d = float(np.linalg.norm(np.asarray(position, dtype=float) - cfg.tx_position))
    if d <= 0:
        raise ValueError("scatterer coincides with the transceiver")
    return 2.0 * d / cfg.c0

def angular_velocity(r_a, r_b, v_a, v_b) -> np.ndarray:
    """Rotation rate of a rigid segment from its endpoint velocities.

    omega = (r_b - r_a) x (v_b - v_a) / ||r_b - r_a||^2. Any spin about
    the segment axis is unobservable from two points and comes out zero.
    """
    r_a = np.asarray(r_a, dtype=float)
    r_b = np.asarray(r_b, dtype=float)
    axis = r_b - r_a
    n2 = float(axis @ axis)
    if n2 <= 1e-12:
        raise ValueError("degenerate segment axis")
    rel = np.asarray(v_b, dtype=float) - np.asarray(v_a, dtype=float)
    return np.cross(axis, rel) / n2


def point_velocity(r_n, r_a, v_a, omega) -> np.ndarray:
    """Rigid-body velocity v_a + omega x (r_n - r_a)."""
    return np.asarray(v_a, dtype=float) + np.cross(
        np.asarray(omega, dtype=float), np.asarray(r_n, dtype=float) - np.asarray(r_a, dtype=float)
    )


def doppler_shift(velocity, position, cfg: RfConfig = None) -> float:
    """Monostatic Doppler (2 f_c / c0) v . u, u pointing at the transceiver."""
    cfg = cfg or RfConfig()
    position = np.asarray(position, dtype=float)
    to_tx = cfg.tx_position - position
    rng = float(np.linalg.norm(to_tx))
    if rng <= 0:
        raise ValueError("scatterer coincides with the transceiver")
    radial = float(np.asarray(velocity, dtype=float) @ (to_tx / rng))
    return 2.0 * cfg.carrier_frequency_hz / cfg.c0 * radial


def part_motion(frame: SkeletonFrame, velocities: np.ndarray, part: BodyPart):
    """Axis endpoint positions and velocities (r_a, r_b, v_a, v_b) of a part."""
    geom = BODY_PART_GEOMETRY[part]
    velocities = np.asarray(velocities, dtype=float)
    ia = [int(k) for k in geom.axis_a]
    ib = [int(k) for k in geom.axis_b]
    r_a = frame.positions[ia].mean(axis=0)
    r_b = frame.positions[ib].mean(axis=0)
    v_a = velocities[ia].mean(axis=0)
    v_b = velocities[ib].mean(axis=0)
    return r_a, r_b, v_a, v_b


class _PhaseBook:
    """Initial phases per tracked path plus accumulated totals."""

    def __init__(self, rng):
        self.rng = rng
        self.initial: Dict[int, float] = {}
        self.total: Dict[int, float] = {}

    def advance(self, path_id: Optional[int], doppler_hz: float, dt: float) -> float:
        if path_id is None:
            return wrap_phase(self.rng.uniform(-math.pi, math.pi))
        if path_id not in self.initial:
            psi = self.rng.uniform(-math.pi, math.pi)
            self.initial[path_id] = psi
            self.total[path_id] = psi
        self.total[path_id] += TWO_PI * doppler_hz * dt
        return wrap_phase(self.total[path_id])


def synthesize_snapshot(
    points: Sequence[ScatteringPoint],
    frame: SkeletonFrame,
    velocities: np.ndarray,
    cfg: RfConfig = None,
    rng=None,
    phase_book: _PhaseBook = None,
    interval_s: float = 0.0,
    snapshot: int = 0,
) -> ChannelSnapshot:
    """Turn one snapshot's labeled points into path samples.

    Standalone calls may pass ``rng`` only; sequence synthesis passes a
    shared ``phase_book`` so phases persist per path across snapshots.
    """
    cfg = cfg or RfConfig()
    if phase_book is None:
        if rng is None:
            rng = np.random.default_rng(0)
        phase_book = _PhaseBook(rng)
    motions: Dict[BodyPart, tuple] = {}
    paths: List[PathSample] = []
    for p in points:
        if p.part is None:
            raise ValueError("point without a part label")
        if p.part not in motions:
            r_a, r_b, v_a, v_b = part_motion(frame, velocities, p.part)
            omega = angular_velocity(r_a, r_b, v_a, v_b)
            motions[p.part] = (r_a, v_a, omega)
        r_a, v_a, omega = motions[p.part]
        d = float(np.linalg.norm(p.position - cfg.tx_position))
        if d <= 0:
            raise ValueError("scatterer coincides with the transceiver")
        gain = amplitude_from_rcs(p.rcs_m2, d, cfg)
        v_n = point_velocity(p.position, r_a, v_a, omega)
        df = doppler_shift(v_n, p.position, cfg)
        phase = phase_book.advance(p.path_id, df, interval_s)
        paths.append(
            PathSample(
                delay_s=2.0 * d / cfg.c0,
                gain=gain,
                doppler_hz=df,
                phase_rad=phase,
                part=p.part,
                snapshot=snapshot,
                path_id=p.path_id,
            )
        )
    return ChannelSnapshot(time_s=float(frame.time), paths=paths)


def synthesize_sequence(
    seq: GestureSequence,
    points_by_snapshot: Sequence[Sequence[ScatteringPoint]],
    cfg: RfConfig = None,
    rng=None,
    smooth_window: int = 5,
) -> List[ChannelSnapshot]:
    """Synthesize every snapshot of a sequence with persistent path phases."""
    if len(points_by_snapshot) != len(seq):
        raise ValueError("one point list per skeleton frame required")
    cfg = cfg or RfConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    vel = sequence_velocities(seq, smooth_window=smooth_window)
    dt = seq.frame_interval() if len(seq) > 1 else 0.0
    book = _PhaseBook(rng)
    out = []
    for t, frame in enumerate(seq.frames):
        out.append(
            synthesize_snapshot(
                points_by_snapshot[t],
                frame,
                vel[t],
                cfg,
                phase_book=book,
                interval_s=dt,
                snapshot=t,
            )
        )
    return out


def pdp(snapshot: ChannelSnapshot, cfg: RfConfig = None) -> DelayProfile:
    """Power delay profile on bins of width 1/bandwidth."""
    cfg = cfg or RfConfig()
    bin_s = 1.0 / cfg.bandwidth_hz
    if not snapshot.paths:
        return DelayProfile(delays_s=np.zeros(0), power=np.zeros(0), bin_s=bin_s)
    idx = np.array([int(p.delay_s / bin_s) for p in snapshot.paths])
    n = int(idx.max()) + 1
    power = np.zeros(n)
    for i, p in zip(idx, snapshot.paths):
        power[i] += p.gain
    return DelayProfile(delays_s=np.arange(n) * bin_s, power=power, bin_s=bin_s)


def rmsds(profile: DelayProfile) -> float:
    """Power-weighted RMS delay spread of a profile."""
    return _rms_spread(profile.delays_s, profile.power)


def snapshot_rmsds(snapshot: ChannelSnapshot) -> float:
    """Delay spread over the exact (unbinned) path delays."""
    if not snapshot.paths:
        raise ValueError("empty snapshot")
    delays = np.array([p.delay_s for p in snapshot.paths])
    power = np.array([p.gain for p in snapshot.paths])
    return _rms_spread(delays, power)


def _rms_spread(x: np.ndarray, w: np.ndarray) -> float:
    total = float(np.sum(w))
    if total <= 0:
        raise ValueError("zero total power")
    m1 = float(np.sum(w * x)) / total
    m2 = float(np.sum(w * x * x)) / total
    return math.sqrt(max(m2 - m1 * m1, 0.0))


def rmsds_timeseries(snapshots: Sequence[ChannelSnapshot], binned: bool = False,
                     cfg: RfConfig = None) -> np.ndarray:
    """Per-snapshot delay spread; empty snapshots yield NaN."""
    out = np.full(len(snapshots), np.nan)
    for i, snap in enumerate(snapshots):
        if not snap.paths:
            continue
        out[i] = rmsds(pdp(snap, cfg)) if binned else snapshot_rmsds(snap)
    return out


def cdf(values):
    """Empirical CDF (sorted values, ranks k/n)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite sample values")
    x = np.sort(values)
    return x, np.arange(1, x.size + 1) / x.size


def instantaneous_spectrum(snapshot: ChannelSnapshot, bin_hz: float = 1.0,
                           f_max_hz: float = None):
    """Per-path power on a Doppler axis; returns (bin lower edges, power).

    Out-of-range shifts land in the edge bins so total power is conserved.
    """
    if bin_hz <= 0:
        raise ValueError("non-positive bin width")
    shifts = np.array([p.doppler_hz for p in snapshot.paths])
    gains = np.array([p.gain for p in snapshot.paths])
    if f_max_hz is None:
        top = float(np.abs(shifts).max()) if shifts.size else 0.0
        f_max_hz = (math.floor(top / bin_hz) + 1) * bin_hz
    half = int(math.ceil(f_max_hz / bin_hz))
    n = 2 * half
    freqs = (np.arange(n) - half) * bin_hz
    power = np.zeros(n)
    for df, g in zip(shifts, gains):
        i = int(math.floor(df / bin_hz)) + half
        power[min(max(i, 0), n - 1)] += g
    return freqs, power


def slow_time_signal(snapshots: Sequence[ChannelSnapshot]) -> np.ndarray:
    return np.array([s.slow_time_sample() for s in snapshots], dtype=complex)


def stft_spectrogram(
    snapshots: Sequence[ChannelSnapshot],
    window_len: int = 128,
    hop: int = 32,
    interval_s: float = None,
) -> Spectrogram:
    """Hann-windowed slow-time STFT; power is |FFT|^2 / window_len.

    With that scaling each frame's spectral power equals the windowed
    signal power exactly (discrete Parseval identity).
    """
    n = len(snapshots)
    if window_len < 2 or window_len > n:
        raise ValueError("window does not fit the sequence")
    if hop < 1:
        raise ValueError("non-positive hop")
    times = np.array([s.time_s for s in snapshots])
    if interval_s is None:
        if n < 2:
            raise ValueError("cannot infer the snapshot interval")
        steps = np.diff(times)
        interval_s = float(steps[0])
        if interval_s <= 0 or np.any(np.abs(steps - interval_s) > 1e-9 + 1e-6 * abs(interval_s)):
            raise ValueError("non-uniform snapshot timing")
    signal = slow_time_signal(snapshots)
    window = np.hanning(window_len)
    starts = range(0, n - window_len + 1, hop)
    frames = []
    mid_times = []
    for s0 in starts:
        seg = signal[s0 : s0 + window_len] * window
        spec = np.fft.fft(seg)
        frames.append(np.fft.fftshift(np.abs(spec) ** 2) / window_len)
        mid_times.append(float(times[s0 : s0 + window_len].mean()))
    doppler = np.fft.fftshift(np.fft.fftfreq(window_len, d=interval_s))
    return Spectrogram(
        times_s=np.array(mid_times),
        doppler_hz=doppler,
        power=np.array(frames),
        window_len=window_len,
        hop=hop,
        interval_s=interval_s,
    )


def ridge_frequencies(spec: Spectrogram) -> np.ndarray:
    """Doppler of the strongest bin in each frame."""
    return spec.doppler_hz[np.argmax(spec.power, axis=1)]


CIR_CSV_FIELDS = "snapshot,time_s,delay_ns,gain,doppler_hz,phase_rad,part,path_id"


def write_cir_csv(path, snapshots: Sequence[ChannelSnapshot]) -> None:
    """Write channel taps, one row per path per snapshot."""
    lines = [version_header().rstrip("\n"), CIR_CSV_FIELDS]
    for i, snap in enumerate(snapshots):
        for p in snap.paths:
            lines.append(
                ",".join(
                    [
                        str(i),
                        fmt_float(snap.time_s),
                        fmt_float(p.delay_s * 1e9),
                        fmt_float(p.gain),
                        fmt_float(p.doppler_hz),
                        fmt_float(p.phase_rad),
                        "" if p.part is None else p.part.tag,
                        str(-1 if p.path_id is None else int(p.path_id)),
                    ]
                )
            )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_cir_csv(path) -> List[ChannelSnapshot]:
    groups: Dict[int, List] = {}
    times: Dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        saw_header = False
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not saw_header:
                if line != CIR_CSV_FIELDS:
                    raise ValueError(f"{path}: unexpected CIR CSV header")
                saw_header = True
                continue
            cols = line.split(",")
            if len(cols) != 8:
                raise ValueError(f"{path}: malformed CIR row")
            snap = int(cols[0])
            times[snap] = float(cols[1])
            pid = int(cols[7])
            groups.setdefault(snap, []).append(
                PathSample(
                    delay_s=float(cols[2]) * 1e-9,
                    gain=float(cols[3]),
                    doppler_hz=float(cols[4]),
                    phase_rad=float(cols[5]),
                    part=BodyPart.from_tag(cols[6]) if cols[6] else None,
                    snapshot=snap,
                    path_id=None if pid < 0 else pid,
                )
            )
    if not saw_header:
        raise ValueError(f"{path}: empty CIR file")
    n = max(groups) + 1 if groups else 0
    out = []
    for i in range(n):
        out.append(ChannelSnapshot(time_s=times.get(i, 0.0), paths=tuple(groups.get(i, []))))
    return out


def write_rmsds_csv(path, times_s, rmsds_s) -> None:
    """Write a delay-spread time series; values in ns, NaN for empty snapshots."""
    lines = [version_header().rstrip("\n"), "snapshot,time_s,rmsds_ns"]
    for i, (t, s) in enumerate(zip(times_s, rmsds_s)):
        val = "nan" if not np.isfinite(s) else fmt_float(s * 1e9)
        lines.append(f"{i},{fmt_float(t)},{val}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_rmsds_csv(path):
    times = []
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#") or line.startswith("snapshot"):
                continue
            cols = line.split(",")
            times.append(float(cols[1]))
            values.append(float(cols[2]) * 1e-9)
    return np.array(times), np.array(values)


def write_delay_profile_csv(path, profile: DelayProfile) -> None:
    lines = [version_header().rstrip("\n"), f"# bin_s={fmt_float(profile.bin_s)}", "delay_s,power"]
    for d, p in zip(profile.delays_s, profile.power):
        lines.append(f"{fmt_float(d)},{fmt_float(p)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_delay_profile_csv(path) -> DelayProfile:
    bin_s = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("# bin_s="):
                bin_s = float(line.split("=", 1)[1])
            elif line and not line.startswith("#") and not line.startswith("delay_s"):
                rows.append([float(v) for v in line.split(",")])
    if bin_s is None:
        raise ValueError("missing bin width header")
    arr = np.array(rows) if rows else np.zeros((0, 2))
    return DelayProfile(delays_s=arr[:, 0], power=arr[:, 1], bin_s=bin_s)


def write_spectrogram_csv(path, spec: Spectrogram) -> None:
    meta = (
        f"# window={spec.window} window_len={spec.window_len} hop={spec.hop}"
        f" interval_s={fmt_float(spec.interval_s)}"
    )
    lines = [version_header().rstrip("\n"), meta]
    lines.append("time_s," + ",".join(fmt_float(f) for f in spec.doppler_hz))
    for t, row in zip(spec.times_s, spec.power):
        lines.append(fmt_float(t) + "," + ",".join(fmt_float(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_spectrogram_csv(path) -> Spectrogram:
    meta = {}
    header = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("# window"):
                for tok in line[2:].split():
                    k, v = tok.split("=", 1)
                    meta[k] = v
            elif not line or line.startswith("#"):
                continue
            elif header is None:
                header = [float(v) for v in line.split(",")[1:]]
            else:
                rows.append([float(v) for v in line.split(",")])
    if header is None or not meta:
        raise ValueError("missing spectrogram headers")
    arr = np.array(rows) if rows else np.zeros((0, len(header) + 1))
    return Spectrogram(
        times_s=arr[:, 0],
        doppler_hz=np.array(header),
        power=arr[:, 1:],
        window_len=int(meta["window_len"]),
        hop=int(meta["hop"]),
        interval_s=float(meta["interval_s"]),
        window=meta.get("window", "hann"),
    )
