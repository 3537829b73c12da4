"""INI-style configuration for the pipeline commands.

An empty file (or no file) reproduces the built-in defaults; any key that
the pipeline does not know is rejected rather than ignored, so typos fail
loudly instead of silently running with defaults.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

from .clustering import TrackerConfig
from .cvae_model import CvaeTrainConfig
from .fileio import atomic_write_text, fmt_float
from .poisson_model import TrainConfig
from .scatter_geom import RfConfig
from .skeleton import BodyPart
from .synthgen import GestureScript, ScatterProcessConfig


@dataclass
class StftConfig:
    window_len: int = 128
    hop: int = 32

    def __post_init__(self):
        if self.window_len < 2 or self.hop < 1:
            raise ValueError("invalid STFT parameters")


@dataclass
class PipelineConfig:
    rf: RfConfig = field(default_factory=RfConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    poisson_train: TrainConfig = field(default_factory=TrainConfig)
    cvae_train: CvaeTrainConfig = field(default_factory=CvaeTrainConfig)
    scatter: ScatterProcessConfig = field(default_factory=ScatterProcessConfig)
    script: GestureScript = field(default_factory=GestureScript)
    stft: StftConfig = field(default_factory=StftConfig)
    seed: int = 0
    threads: int = 1
    smooth_window: int = 5
    eval_window_snapshots: int = 10
    eval_draws: int = 100


def default_config() -> PipelineConfig:
    return PipelineConfig()


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw: str, n: int) -> np.ndarray:
    vals = [float(v) for v in raw.split(",")]
    if len(vals) != n:
        raise ValueError(f"expected {n} comma-separated values, got {len(vals)}")
    return np.array(vals)


# section -> key -> (getter, setter); setters mutate a PipelineConfig.
def _schema():
    def rf_set(attr, cast=float):
        return (
            lambda c: getattr(c.rf, attr),
            lambda c, raw: setattr(c.rf, attr, cast(raw)),
        )

    def sub_set(sub, attr, cast):
        return (
            lambda c: getattr(getattr(c, sub), attr),
            lambda c, raw: setattr(getattr(c, sub), attr, cast(raw)),
        )

    def top_set(attr, cast):
        return (
            lambda c: getattr(c, attr),
            lambda c, raw: setattr(c, attr, cast(raw)),
        )

    parts = len(BodyPart)
    return {
        "rf": {
            "carrier_frequency_hz": rf_set("carrier_frequency_hz"),
            "bandwidth_hz": rf_set("bandwidth_hz"),
            "tx_x": (
                lambda c: c.rf.tx_position[0],
                lambda c, raw: c.rf.tx_position.__setitem__(0, float(raw)),
            ),
            "tx_y": (
                lambda c: c.rf.tx_position[1],
                lambda c, raw: c.rf.tx_position.__setitem__(1, float(raw)),
            ),
            "tx_z": (
                lambda c: c.rf.tx_position[2],
                lambda c, raw: c.rf.tx_position.__setitem__(2, float(raw)),
            ),
        },
        "tracker": {
            "gate_distance_m": sub_set("tracker", "gate_distance_m", float),
            "outlier_threshold_m": sub_set("tracker", "outlier_threshold_m", float),
            "filter_before_tracking": sub_set("tracker", "filter_before_tracking", _parse_bool),
        },
        "poisson_train": {
            "epochs": sub_set("poisson_train", "epochs", int),
            "batch_size": sub_set("poisson_train", "batch_size", int),
            "learning_rate": sub_set("poisson_train", "learning_rate", float),
        },
        "cvae_train": {
            "epochs": sub_set("cvae_train", "epochs", int),
            "batch_size": sub_set("cvae_train", "batch_size", int),
            "learning_rate": sub_set("cvae_train", "learning_rate", float),
            "beta_kl": sub_set("cvae_train", "beta_kl", float),
            "latent_dim": sub_set("cvae_train", "latent_dim", int),
            "share_gesture_encoder": sub_set("cvae_train", "share_gesture_encoder", _parse_bool),
        },
        "scatter": {
            "base_rates": (
                lambda c: ",".join(fmt_float(c.scatter.base_rates[p]) for p in BodyPart),
                lambda c, raw: setattr(
                    c.scatter,
                    "base_rates",
                    dict(zip(BodyPart, _parse_floats(raw, parts))),
                ),
            ),
            "motion_gain_s_per_m": sub_set("scatter", "motion_gain_s_per_m", float),
            "jitter_std_m": sub_set("scatter", "jitter_std_m", float),
            "rcs_log10_mean": (
                lambda c: ",".join(fmt_float(c.scatter.rcs_log10_mean[p]) for p in BodyPart),
                lambda c, raw: setattr(
                    c.scatter,
                    "rcs_log10_mean",
                    dict(zip(BodyPart, _parse_floats(raw, parts))),
                ),
            ),
            "rcs_log10_std": sub_set("scatter", "rcs_log10_std", float),
            "placement_margin": sub_set("scatter", "placement_margin", float),
            "path_lifetime_s": sub_set("scatter", "path_lifetime_s", float),
            "noise_delay_ns": sub_set("scatter", "noise_delay_ns", float),
            "noise_angle_deg": sub_set("scatter", "noise_angle_deg", float),
            "noise_amplitude_db": sub_set("scatter", "noise_amplitude_db", float),
        },
        "script": {
            "left": sub_set("script", "left", str),
            "right": sub_set("script", "right", str),
            "amplitude_m": sub_set("script", "amplitude_m", float),
            "period_s": sub_set("script", "period_s", float),
            "duration_s": sub_set("script", "duration_s", float),
            "interval_s": sub_set("script", "interval_s", float),
            "subject_scale": sub_set("script", "subject_scale", float),
            "subject": sub_set("script", "subject", str),
            "gesture": sub_set("script", "gesture", str),
        },
        "stft": {
            "window_len": sub_set("stft", "window_len", int),
            "hop": sub_set("stft", "hop", int),
        },
        "pipeline": {
            "seed": top_set("seed", int),
            "threads": top_set("threads", int),
            "smooth_window": top_set("smooth_window", int),
            "eval_window_snapshots": top_set("eval_window_snapshots", int),
            "eval_draws": top_set("eval_draws", int),
        },
    }


def load_config(path=None) -> PipelineConfig:
    """Parse an INI file over the defaults; unknown sections/keys error."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    schema = _schema()
    for section in parser.sections():
        if section not in schema:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in schema[section]:
                raise ValueError(f"unknown config key [{section}] {key}")
            _, setter = schema[section][key]
            setter(cfg, raw)
    # re-run dataclass validation on the mutated sub-configs
    for sub in (cfg.rf, cfg.tracker, cfg.poisson_train, cfg.cvae_train, cfg.scatter, cfg.script, cfg.stft):
        sub.__post_init__()
    if cfg.threads < 1 or cfg.eval_window_snapshots < 1 or cfg.eval_draws < 1:
        raise ValueError("invalid pipeline settings")
    return cfg


def config_to_text(cfg: PipelineConfig) -> str:
    """Render every effective value; reloading the text reproduces cfg."""
    out = io.StringIO()
    schema = _schema()
    for section in schema:
        out.write(f"[{section}]\n")
        for key, (getter, _) in schema[section].items():
            value = getter(cfg)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = fmt_float(value)
            else:
                text = str(value)
            out.write(f"{key} = {text}\n")
        out.write("\n")
    return out.getvalue()


def write_effective_config(path, cfg: PipelineConfig) -> None:
    atomic_write_text(path, config_to_text(cfg))
