"""Multipath estimates <-> scattering points for a monostatic single-bounce
geometry, plus the radar-equation RCS conversions.

Angles follow the usual spherical convention around the transceiver:
azimuth in the x-y plane from +x, elevation from the horizontal plane.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fileio import atomic_write_text, fmt_float, iter_data_lines, version_header
from .skeleton import BodyPart

SPEED_OF_LIGHT = 299_792_458.0


@dataclass
class RfConfig:
    carrier_frequency_hz: float = 28.5e9
    bandwidth_hz: float = 2e9
    tx_position: np.ndarray = None
    c0: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.tx_position is None:
            self.tx_position = np.zeros(3)
        self.tx_position = np.asarray(self.tx_position, dtype=float).reshape(3)
        if self.carrier_frequency_hz <= 0 or self.bandwidth_hz <= 0:
            raise ValueError("frequencies must be positive")


@dataclass
class MpcEstimate:
    """One estimated propagation path: delay, direction, linear amplitude."""

    delay_s: float
    azimuth_rad: float
    elevation_rad: float
    amplitude: float
    snapshot: int = 0

    def __post_init__(self):
        if not abs(self.elevation_rad) <= math.pi / 2 + 1e-12:
            raise ValueError("elevation outside [-pi/2, pi/2]")
        if self.amplitude < 0:
            raise ValueError("negative amplitude")


@dataclass
class ScatteringPoint:
    """A scattering point in the global frame with its radar cross-section."""

    position: np.ndarray
    rcs_m2: float
    snapshot: int = 0
    part: Optional[BodyPart] = None
    path_id: Optional[int] = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("non-finite point position")
        if self.rcs_m2 < 0 or not np.isfinite(self.rcs_m2):
            raise ValueError("invalid RCS")


def rcs_from_amplitude(amplitude: float, distance_m: float, cfg: RfConfig) -> float:
    """Radar cross-section implied by a path's linear amplitude at range d."""
    if distance_m <= 0:
        raise ValueError("non-positive distance")
    scale = (4.0 * math.pi) ** 3
    return scale * (abs(amplitude) * distance_m**2 * cfg.carrier_frequency_hz / cfg.c0) ** 2


def amplitude_from_rcs(rcs_m2: float, distance_m: float, cfg: RfConfig) -> float:
    """Inverse path gain |alpha|^2 for a given RCS at range d (radar equation)."""
    if distance_m <= 0:
        raise ValueError("non-positive distance")
    if rcs_m2 < 0:
        raise ValueError("negative RCS")
    scale = (4.0 * math.pi) ** 3
    return cfg.c0**2 * rcs_m2 / (scale * cfg.carrier_frequency_hz**2 * distance_m**4)


def mpc_to_point(est: MpcEstimate, cfg: RfConfig) -> ScatteringPoint:
    """Locate the single-bounce scatterer for a round-trip path estimate."""
    if est.delay_s <= 0:
        raise ValueError("non-causal delay")
    d = cfg.c0 * est.delay_s / 2.0
    ce = math.cos(est.elevation_rad)
    rel = d * np.array(
        [
            ce * math.cos(est.azimuth_rad),
            ce * math.sin(est.azimuth_rad),
            math.sin(est.elevation_rad),
        ]
    )
    rcs = rcs_from_amplitude(est.amplitude, d, cfg)
    return ScatteringPoint(
        position=cfg.tx_position + rel, rcs_m2=rcs, snapshot=est.snapshot
    )


def point_to_mpc(point: ScatteringPoint, cfg: RfConfig) -> MpcEstimate:
    """Project a scattering point back to (delay, angles, amplitude)."""
    rel = point.position - cfg.tx_position
    d = float(np.linalg.norm(rel))
    if d <= 0:
        raise ValueError("point coincides with the transceiver")
    delay = 2.0 * d / cfg.c0
    elevation = math.asin(max(-1.0, min(1.0, rel[2] / d)))
    azimuth = math.atan2(rel[1], rel[0])
    amplitude = math.sqrt(amplitude_from_rcs(point.rcs_m2, d, cfg))
    return MpcEstimate(
        delay_s=delay,
        azimuth_rad=azimuth,
        elevation_rad=elevation,
        amplitude=amplitude,
        snapshot=point.snapshot,
    )


MPC_CSV_FIELDS = [
    "snapshot",
    "time_s",
    "delay_ns",
    "azimuth_deg",
    "elevation_deg",
    "amplitude_linear",
]


def write_mpc_csv(path, estimates, interval_s: float) -> None:
    """Write MPC estimates; per-row time is snapshot * interval."""
    buf = io.StringIO()
    buf.write(version_header())
    writer = csv.writer(buf)
    writer.writerow(MPC_CSV_FIELDS)
    for est in estimates:
        writer.writerow(
            [
                str(int(est.snapshot)),
                fmt_float(est.snapshot * interval_s),
                fmt_float(est.delay_s * 1e9),
                fmt_float(math.degrees(est.azimuth_rad)),
                fmt_float(math.degrees(est.elevation_rad)),
                fmt_float(est.amplitude),
            ]
        )
    atomic_write_text(path, buf.getvalue())


def read_mpc_csv(path):
    """Read MPC estimates back as a list, in file order."""
    out = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(iter_data_lines(fh))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty MPC file") from None
        if header != MPC_CSV_FIELDS:
            raise ValueError(f"{path}: unexpected MPC CSV header")
        for row in reader:
            if len(row) != len(MPC_CSV_FIELDS):
                raise ValueError(f"{path}: malformed MPC row")
            out.append(
                MpcEstimate(
                    delay_s=float(row[2]) * 1e-9,
                    azimuth_rad=math.radians(float(row[3])),
                    elevation_rad=math.radians(float(row[4])),
                    amplitude=float(row[5]),
                    snapshot=int(row[0]),
                )
            )
    return out
