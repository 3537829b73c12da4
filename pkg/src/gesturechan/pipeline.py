"""End-to-end glue: preprocessing, dataset assembly, the trained model
bundle, sequence generation, and the evaluation metrics reported by the
CLI. Everything here is deterministic given (inputs, seed).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, cvae_model, nnkit, poisson_model
from .channel import (
    ChannelSnapshot,
    ridge_frequencies,
    snapshot_rmsds,
    stft_spectrogram,
)
from .clustering import (
    TrackerConfig,
    filter_outliers,
    label_all,
    points_from_trajectories,
    track_paths,
)
from .cvae_model import (
    CvaeDataset,
    CvaeNet,
    CvaeTrainConfig,
    FeatureStats,
    GenerationState,
    RCS_FLOOR_M2,
    gesture_net_spec,
)
from .poisson_model import CountSample, PoissonNet, TrainConfig
from .scatter_geom import MpcEstimate, RfConfig, ScatteringPoint, mpc_to_point
from .skeleton import (
    BodyPart,
    GestureSequence,
    LocalFrame,
    N_KEYPOINTS,
    align_sequence,
    interpolate_sequence,
    local_frame,
)

N_PARTS = len(BodyPart)


# ---------------------------------------------------------------- preprocessing

def preprocess_sequence(
    seq: GestureSequence,
    target_interval_s: Optional[float] = None,
    reference=None,
) -> GestureSequence:
    """Align to the first-frame belly and optionally resample in time."""
    out = align_sequence(seq, reference)
    if target_interval_s is not None and len(out) > 1:
        if abs(out.frame_interval() - target_interval_s) > 1e-12:
            out = interpolate_sequence(out, target_interval_s)
    return out


def points_from_mpc(estimates: Sequence[MpcEstimate], rf: RfConfig) -> List[ScatteringPoint]:
    return [mpc_to_point(e, rf) for e in estimates]


def cluster_sequence(points, seq, cfg: TrackerConfig):
    """Outlier gate -> greedy tracking -> per-trajectory part labels.

    Returns (points_by_snapshot, trajectories); the returned points carry
    part labels and path ids.
    """
    if cfg.filter_before_tracking:
        points = filter_outliers(points, seq, cfg)
    n = len(seq)
    per_snap = [[] for _ in range(n)]
    for p in points:
        per_snap[p.snapshot].append(p)
    trajectories = track_paths(per_snap, cfg)
    label_all(trajectories, seq)
    return points_from_trajectories(trajectories, n), trajectories


# ---------------------------------------------------------------- datasets

def count_matrix(points_by_snapshot) -> np.ndarray:
    """(n_snapshots, n_parts) realized counts."""
    out = np.zeros((len(points_by_snapshot), N_PARTS), dtype=int)
    for t, pts in enumerate(points_by_snapshot):
        for p in pts:
            if p.part is None:
                raise ValueError("unlabeled point in count dataset")
            out[t, int(p.part)] += 1
    return out


def build_count_dataset(aligned_seq: GestureSequence, points_by_snapshot):
    counts = count_matrix(points_by_snapshot)
    return [
        (aligned_seq.frames[t], CountSample(counts[t]))
        for t in range(len(aligned_seq))
    ]


def local_frames_by_snapshot(seq: GestureSequence, rf: RfConfig) -> List[Dict[BodyPart, LocalFrame]]:
    """Per-snapshot part frames, with the transverse-axis fallback chained
    through time so near-singular geometries inherit the previous frame."""
    prev_gamma: Dict[BodyPart, np.ndarray] = {}
    out = []
    for frame in seq.frames:
        frames_here = {}
        for part in BodyPart:
            fr = local_frame(frame, part, rf.tx_position, fallback_gamma=prev_gamma.get(part))
            prev_gamma[part] = fr.gamma
            frames_here[part] = fr
        out.append(frames_here)
    return out


def _std_floor(x: np.ndarray) -> np.ndarray:
    return np.where(x < 1e-8, 1.0, x)


def build_cvae_datasets(
    seq: GestureSequence,
    points_by_snapshot,
    rf: RfConfig,
    match_gate_m: float = 0.15,
) -> Dict[BodyPart, CvaeDataset]:
    """Per-part training rows mirroring the sequential generation protocol.

    Within a snapshot, rows are delay-ordered and the intra-snapshot
    condition is the previous row's feature. The temporal condition is the
    gated nearest neighbor (part-local coordinates) among the previous
    snapshot's points of the same part.
    """
    n = len(seq)
    if len(points_by_snapshot) != n:
        raise ValueError("points/frames length mismatch")
    aligned = align_sequence(seq)
    flats = aligned.stacked_positions().reshape(n, -1)
    frame_mean = flats.mean(axis=0)
    frame_std = _std_floor(flats.std(axis=0))
    frames_lf = local_frames_by_snapshot(seq, rf)

    datasets: Dict[BodyPart, CvaeDataset] = {}
    for part in BodyPart:
        recs_by_snap = []
        for t, pts in enumerate(points_by_snapshot):
            recs = []
            for p in pts:
                if p.part != part:
                    continue
                coords = frames_lf[t][part].to_local(p.position)
                delay = 2.0 * float(np.linalg.norm(p.position - rf.tx_position)) / rf.c0
                recs.append((coords, math.log10(max(p.rcs_m2, RCS_FLOOR_M2)), delay))
            recs.sort(key=lambda r: r[2])
            recs_by_snap.append(recs)

        all_coords = np.array([r[0] for recs in recs_by_snap for r in recs], dtype=float)
        all_lg = np.array([r[1] for recs in recs_by_snap for r in recs], dtype=float)
        if all_coords.size == 0:
            stats = FeatureStats(
                coord_mean=np.zeros(3),
                coord_std=np.ones(3),
                rcs_log10_min=0.0,
                rcs_log10_max=1.0,
                frame_mean=frame_mean,
                frame_std=frame_std,
            )
            datasets[part] = CvaeDataset(
                part=part,
                frames_flat=np.zeros((0, N_KEYPOINTS * 3)),
                x=np.zeros((0, 4)),
                cpri=np.zeros((0, 4)),
                cpre=np.zeros((0, 4)),
                stats=stats,
            )
            continue
        lo, hi = float(all_lg.min()), float(all_lg.max())
        stats = FeatureStats(
            coord_mean=all_coords.mean(axis=0),
            coord_std=_std_floor(all_coords.std(axis=0)),
            rcs_log10_min=lo,
            rcs_log10_max=hi,
            frame_mean=frame_mean,
            frame_std=frame_std,
        )
        span = hi - lo if hi - lo > 1e-12 else 1.0

        feats_by_snap = []
        for recs in recs_by_snap:
            feats = [
                np.concatenate([(c - stats.coord_mean) / stats.coord_std, [(lg - lo) / span]])
                for c, lg, _ in recs
            ]
            feats_by_snap.append(feats)

        rows_frame, rows_x, rows_pri, rows_pre = [], [], [], []
        for t, recs in enumerate(recs_by_snap):
            prev_recs = recs_by_snap[t - 1] if t > 0 else []
            prev_feats = feats_by_snap[t - 1] if t > 0 else []
            for i, (coords, _, _) in enumerate(recs):
                cpre = np.zeros(4)
                if prev_recs:
                    dists = [float(np.linalg.norm(pr[0] - coords)) for pr in prev_recs]
                    j = int(np.argmin(dists))
                    if dists[j] <= match_gate_m:
                        cpre = prev_feats[j]
                rows_frame.append(flats[t])
                rows_x.append(feats_by_snap[t][i])
                rows_pri.append(feats_by_snap[t][i - 1] if i > 0 else np.zeros(4))
                rows_pre.append(cpre)

        datasets[part] = CvaeDataset(
            part=part,
            frames_flat=np.array(rows_frame),
            x=np.array(rows_x),
            cpri=np.array(rows_pri),
            cpre=np.array(rows_pre),
            stats=stats,
        )
    return datasets


def merge_cvae_datasets(per_sequence: Sequence[Dict[BodyPart, CvaeDataset]]) -> Dict[BodyPart, CvaeDataset]:
    """Concatenate per-sequence datasets and refit the normalization.

    Conditions were built in each sequence's own normalized space, so rows
    are mapped into the pooled space before concatenation.
    """
    out: Dict[BodyPart, CvaeDataset] = {}
    for part in BodyPart:
        parts = [d[part] for d in per_sequence]
        nonempty = [d for d in parts if len(d) > 0]
        if not nonempty:
            out[part] = parts[0]
            continue
        # pooled feature stats from de-normalized rows
        raw_coords, raw_lg = [], []
        for d in nonempty:
            raw_coords.append(d.x[:, :3] * d.stats.coord_std + d.stats.coord_mean)
            span = d.stats.rcs_log10_max - d.stats.rcs_log10_min
            span = span if span > 1e-12 else 1.0
            raw_lg.append(d.x[:, 3] * span + d.stats.rcs_log10_min)
        coords = np.concatenate(raw_coords)
        lg = np.concatenate(raw_lg)
        frames = np.concatenate([d.frames_flat for d in nonempty])
        frame_mean = frames.mean(axis=0)
        frame_std = _std_floor(frames.std(axis=0))
        stats = FeatureStats(
            coord_mean=coords.mean(axis=0),
            coord_std=_std_floor(coords.std(axis=0)),
            rcs_log10_min=float(lg.min()),
            rcs_log10_max=float(lg.max()),
            frame_mean=frame_mean,
            frame_std=frame_std,
        )

        def remap(block: np.ndarray, d: CvaeDataset) -> np.ndarray:
            if block.size == 0:
                return block
            zero = np.all(block == 0.0, axis=1)
            span_old = d.stats.rcs_log10_max - d.stats.rcs_log10_min
            span_old = span_old if span_old > 1e-12 else 1.0
            span_new = stats.rcs_log10_max - stats.rcs_log10_min
            span_new = span_new if span_new > 1e-12 else 1.0
            c = block[:, :3] * d.stats.coord_std + d.stats.coord_mean
            g = block[:, 3] * span_old + d.stats.rcs_log10_min
            mapped = np.concatenate(
                [
                    (c - stats.coord_mean) / stats.coord_std,
                    ((g - stats.rcs_log10_min) / span_new)[:, None],
                ],
                axis=1,
            )
            mapped[zero] = 0.0  # zero vectors mean "undefined", keep them zero
            return mapped

        out[part] = CvaeDataset(
            part=part,
            frames_flat=frames,
            x=np.concatenate([remap(d.x, d) for d in nonempty]),
            cpri=np.concatenate([remap(d.cpri, d) for d in nonempty]),
            cpre=np.concatenate([remap(d.cpre, d) for d in nonempty]),
            stats=stats,
        )
    return out


# ---------------------------------------------------------------- model bundle

@dataclass
class ModelBundle:
    counts: PoissonNet
    parts: Dict[BodyPart, CvaeNet]
    shared_gesture_encoder: bool = True


def train_models(
    count_dataset,
    cvae_datasets: Dict[BodyPart, CvaeDataset],
    poisson_cfg: TrainConfig = None,
    cvae_cfg: CvaeTrainConfig = None,
) -> ModelBundle:
    """Train the count network and the six per-part feature models.

    With a shared gesture encoder, one encoder instance receives gradient
    updates from every part's training pass, in fixed part order.
    """
    poisson_cfg = poisson_cfg or TrainConfig()
    cvae_cfg = cvae_cfg or CvaeTrainConfig()
    counts = poisson_model.train(count_dataset, poisson_cfg)
    shared = cvae_cfg.share_gesture_encoder
    ges = None
    if shared:
        ges = nnkit.build_network(
            gesture_net_spec(),
            rng=nnkit.make_rng((cvae_cfg.seed, 210)),
            input_shape=(N_KEYPOINTS, 3),
        )
    parts = {}
    for part in BodyPart:
        parts[part] = cvae_model.train_part(
            cvae_datasets[part], cvae_cfg, gesture_encoder=ges
        )
    return ModelBundle(counts=counts, parts=parts, shared_gesture_encoder=shared)


MANIFEST_NAME = "manifest.json"


def save_bundle(dir_path, bundle: ModelBundle) -> None:
    os.makedirs(dir_path, exist_ok=True)
    poisson_model.save(os.path.join(dir_path, "counts.json"), bundle.counts)
    part_files = {}
    for part, net in bundle.parts.items():
        fname = f"part_{part.tag}.json"
        cvae_model.save_part(os.path.join(dir_path, fname), net)
        part_files[part.tag] = fname
    ges_file = ""
    if bundle.shared_gesture_encoder:
        ges_file = "gesture_encoder.json"
        any_net = bundle.parts[BodyPart.FOREARM_L]
        nnkit.save_checkpoint(
            os.path.join(dir_path, ges_file),
            spec=any_net.ges_net.spec(),
            weights=any_net.ges_net.get_flat(),
            norm_stats={},
            seed=any_net.seed,
            epochs=any_net.epochs,
            kind="gesture_encoder",
        )
    manifest = {
        "kind": "model_bundle",
        "pipeline_version": __version__,
        "counts_file": "counts.json",
        "parts": [part.tag for part in BodyPart],
        "part_files": part_files,
        "gesture_encoder_file": ges_file,
        "shared_gesture_encoder": bundle.shared_gesture_encoder,
    }
    from .fileio import atomic_write_text

    atomic_write_text(
        os.path.join(dir_path, MANIFEST_NAME),
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
    )


def load_bundle(dir_path) -> ModelBundle:
    with open(os.path.join(dir_path, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "model_bundle":
        raise ValueError("not a model bundle directory")
    counts = poisson_model.load(os.path.join(dir_path, manifest["counts_file"]))
    parts = {}
    for tag in manifest["parts"]:
        part = BodyPart.from_tag(tag)
        parts[part] = cvae_model.load_part(
            os.path.join(dir_path, manifest["part_files"][tag])
        )
    shared = bool(manifest.get("shared_gesture_encoder"))
    if shared and manifest.get("gesture_encoder_file"):
        payload = nnkit.load_checkpoint(os.path.join(dir_path, manifest["gesture_encoder_file"]))
        ges = nnkit.build_network(payload["spec"])
        ges.set_flat(payload["weights"])
        for net in parts.values():
            net.ges_net = ges
    return ModelBundle(counts=counts, parts=parts, shared_gesture_encoder=shared)


# ---------------------------------------------------------------- generation

def assign_path_ids(points_by_snapshot, cfg: TrackerConfig):
    """Track each part's generated points over time and stamp path ids."""
    next_id = 0
    for part in BodyPart:
        per_snap = [[p for p in pts if p.part == part] for pts in points_by_snapshot]
        trajectories = track_paths(per_snap, cfg)
        for tr in trajectories:
            for p in tr.points:
                p.path_id = tr.path_id + next_id
        next_id += len(trajectories)
    return points_by_snapshot


def generate_sequence(
    bundle: ModelBundle,
    seq: GestureSequence,
    rf: RfConfig,
    tracker_cfg: TrackerConfig,
    seed: int = 0,
) -> List[List[ScatteringPoint]]:
    """Rates -> counts -> sequential feature decoding -> tracked path ids."""
    aligned = align_sequence(seq)
    rng = nnkit.make_rng((seed, 401))
    state = GenerationState.for_sequence(seq)
    out: List[List[ScatteringPoint]] = []
    for t, frame in enumerate(seq.frames):
        lam = bundle.counts.predict_rates(aligned.frames[t])
        counts = poisson_model.sample_counts(lam, rng)
        pts, state = cvae_model.generate_points(
            bundle.parts,
            frame,
            counts,
            state,
            rng,
            rf,
            match_gate_m=tracker_cfg.gate_distance_m,
        )
        for p in pts:
            p.snapshot = t
        out.append(pts)
    assign_path_ids(out, tracker_cfg)
    return out


# ---------------------------------------------------------------- metrics

def count_histogram_tv(gen_by_snapshot, truth_by_snapshot) -> Dict[BodyPart, float]:
    """Whole-sequence TV distance between per-part count histograms."""
    gen_counts = count_matrix(gen_by_snapshot)
    truth_counts = count_matrix(truth_by_snapshot)
    return {
        part: poisson_model.total_variation(
            gen_counts[:, int(part)], truth_counts[:, int(part)]
        )
        for part in BodyPart
    }


def part_feature_matrix(points_by_snapshot, seq: GestureSequence, rf: RfConfig) -> Dict[BodyPart, np.ndarray]:
    """Per part: rows of raw (zeta, beta, gamma, log10 rcs) over the corpus."""
    frames_lf = local_frames_by_snapshot(seq, rf)
    rows: Dict[BodyPart, list] = {part: [] for part in BodyPart}
    for t, pts in enumerate(points_by_snapshot):
        for p in pts:
            if p.part is None:
                continue
            coords = frames_lf[t][p.part].to_local(p.position)
            rows[p.part].append(
                np.concatenate([coords, [math.log10(max(p.rcs_m2, RCS_FLOOR_M2))]])
            )
    return {
        part: (np.array(v) if v else np.zeros((0, 4))) for part, v in rows.items()
    }


def quartile_deltas(gen_features: np.ndarray, truth_features: np.ndarray) -> np.ndarray:
    """|generated - true| quartiles, normalized by the true IQR.

    Returns a (3, n_features) matrix for the 25th/50th/75th percentiles.
    """
    if gen_features.shape[0] == 0 or truth_features.shape[0] == 0:
        raise ValueError("empty feature sample")
    qs = (25.0, 50.0, 75.0)
    gq = np.percentile(gen_features, qs, axis=0)
    tq = np.percentile(truth_features, qs, axis=0)
    iqr = tq[2] - tq[0]
    iqr = np.where(iqr < 1e-12, 1.0, iqr)
    return np.abs(gq - tq) / iqr


def mean_matched_distance(gen_by_snapshot, truth_by_snapshot) -> Dict[BodyPart, float]:
    """Per part: mean nearest-neighbor distance from generated points to
    truth points of the same snapshot, averaged over snapshots where both
    sides have points."""
    sums = {part: 0.0 for part in BodyPart}
    counts = {part: 0 for part in BodyPart}
    for gen_pts, tru_pts in zip(gen_by_snapshot, truth_by_snapshot):
        for part in BodyPart:
            g = np.array([p.position for p in gen_pts if p.part == part])
            t = np.array([p.position for p in tru_pts if p.part == part])
            if g.shape[0] == 0 or t.shape[0] == 0:
                continue
            d = np.linalg.norm(g[:, None, :] - t[None, :, :], axis=2)
            sums[part] += float(d.min(axis=1).mean())
            counts[part] += 1
    return {
        part: (sums[part] / counts[part]) if counts[part] else float("nan")
        for part in BodyPart
    }


def rmsds_error_series(gen_snaps: Sequence[ChannelSnapshot], truth_snaps: Sequence[ChannelSnapshot]) -> np.ndarray:
    """Per-snapshot |delay-spread difference| on exact path delays.

    Both sides empty counts as zero error; one side empty is infinite.
    """
    if len(gen_snaps) != len(truth_snaps):
        raise ValueError("snapshot count mismatch")
    out = np.zeros(len(gen_snaps))
    for i, (g, t) in enumerate(zip(gen_snaps, truth_snaps)):
        if len(g) == 0 and len(t) == 0:
            out[i] = 0.0
        elif len(g) == 0 or len(t) == 0:
            out[i] = float("inf")
        else:
            out[i] = abs(snapshot_rmsds(g) - snapshot_rmsds(t))
    return out


def ridge_error_bins(gen_snaps, truth_snaps, window_len: int, hop: int) -> float:
    """Mean |ridge difference| between the two spectrograms, in Doppler bins."""
    spec_g = stft_spectrogram(gen_snaps, window_len=window_len, hop=hop)
    spec_t = stft_spectrogram(truth_snaps, window_len=window_len, hop=hop)
    bin_hz = 1.0 / (window_len * spec_t.interval_s)
    rg = ridge_frequencies(spec_g)
    rt = ridge_frequencies(spec_t)
    return float(np.abs(rg - rt).mean() / bin_hz)
