"""Command-line pipeline.

Subcommands mirror the processing chain: synth-data -> preprocess ->
cluster -> train -> generate -> simulate -> evaluate. Every command takes
``--config/--seed/--out/--threads``, writes its outputs atomically into
the output directory together with the fully rendered effective config,
and is deterministic given (inputs, seed). Failures exit nonzero with a
single ``error: <command>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import nnkit, pipeline
from .channel import (
    DelayProfile,
    pdp,
    rmsds_timeseries,
    stft_spectrogram,
    synthesize_sequence,
    write_cir_csv,
    write_delay_profile_csv,
    write_rmsds_csv,
    write_spectrogram_csv,
)
from .clustering import read_labeled_csv, write_labeled_csv
from .config import PipelineConfig, default_config, load_config, write_effective_config
from .fileio import atomic_write_text, fmt_float, version_header
from .scatter_geom import read_mpc_csv, write_mpc_csv
from .skeleton import align_sequence, interpolate_sequence, read_keypoints_csv, write_keypoints_csv
from .synthgen import (
    animate,
    export_as_mpc,
    read_truth_points_csv,
    sample_scatter_truth,
    write_truth_points_csv,
    write_truth_rates_csv,
)


def _group_by_snapshot(points, n: int):
    out = [[] for _ in range(n)]
    for p in points:
        if p.snapshot < 0 or p.snapshot >= n:
            raise ValueError(f"point snapshot {p.snapshot} outside sequence of {n}")
        out[p.snapshot].append(p)
    return out


def _read_points_any(path):
    """Scattering points from either the labeled or the truth-sidecar format."""
    try:
        return read_labeled_csv(path)
    except ValueError:
        return read_truth_points_csv(path)


# ------------------------------------------------------------------ commands

def cmd_synth_data(cfg: PipelineConfig, args, out: Path) -> None:
    rng = nnkit.make_rng((cfg.seed, 100))
    seq = animate(cfg.script)
    truth = sample_scatter_truth(seq, cfg.scatter, rng, cfg.rf)
    mpcs = export_as_mpc(truth, cfg.rf, cfg.scatter, rng)
    write_keypoints_csv(out / "keypoints.csv", seq)
    write_mpc_csv(out / "mpc.csv", mpcs, seq.frame_interval())
    write_truth_rates_csv(out / "truth_rates.csv", truth)
    write_truth_points_csv(out / "truth_points.csv", truth)


def cmd_preprocess(cfg: PipelineConfig, args, out: Path) -> None:
    seq = read_keypoints_csv(args.keypoints)
    mpcs = read_mpc_csv(args.mpc)
    if len(seq) > 1 and mpcs:
        # resample keypoints onto the channel snapshot grid
        snaps = sorted({e.snapshot for e in mpcs})
        n_target = snaps[-1] + 1
        if n_target > 1:
            target = seq.frames[-1].time / (n_target - 1)
            if abs(seq.frame_interval() - target) > 1e-12:
                seq = interpolate_sequence(seq, target)
    write_keypoints_csv(out / "keypoints_proc.csv", seq)
    write_keypoints_csv(out / "keypoints_aligned.csv", align_sequence(seq))
    points = pipeline.points_from_mpc(mpcs, cfg.rf)
    write_labeled_csv(out / "points.csv", points)


def cmd_cluster(cfg: PipelineConfig, args, out: Path) -> None:
    seq = read_keypoints_csv(args.keypoints)
    points = read_labeled_csv(args.points)
    per_snap, _ = pipeline.cluster_sequence(points, seq, cfg.tracker)
    write_labeled_csv(out / "points_labeled.csv", [p for snap in per_snap for p in snap])


def cmd_train(cfg: PipelineConfig, args, out: Path) -> None:
    if len(args.points) != len(args.keypoints):
        raise ValueError("--points and --keypoints must be given the same number of times")
    count_dataset = []
    per_sequence = []
    for pfile, kfile in zip(args.points, args.keypoints):
        seq = read_keypoints_csv(kfile)
        points = read_labeled_csv(pfile)
        per_snap = _group_by_snapshot(points, len(seq))
        count_dataset.extend(pipeline.build_count_dataset(align_sequence(seq), per_snap))
        per_sequence.append(
            pipeline.build_cvae_datasets(seq, per_snap, cfg.rf, cfg.tracker.gate_distance_m)
        )
    datasets = pipeline.merge_cvae_datasets(per_sequence)
    bundle = pipeline.train_models(count_dataset, datasets, cfg.poisson_train, cfg.cvae_train)
    pipeline.save_bundle(out / "model", bundle)


def cmd_generate(cfg: PipelineConfig, args, out: Path) -> None:
    bundle = pipeline.load_bundle(args.model)
    seq = read_keypoints_csv(args.keypoints)
    per_snap = pipeline.generate_sequence(bundle, seq, cfg.rf, cfg.tracker, seed=cfg.seed)
    write_labeled_csv(out / "points_generated.csv", [p for snap in per_snap for p in snap])


def _mean_pdp(snapshots, cfg: PipelineConfig) -> DelayProfile:
    profiles = [pdp(snap, cfg.rf) for snap in snapshots]
    bin_s = 1.0 / cfg.rf.bandwidth_hz
    n = max((len(p.power) for p in profiles), default=0)
    power = np.zeros(n)
    for p in profiles:
        power[: len(p.power)] += p.power
    if snapshots:
        power /= len(snapshots)
    return DelayProfile(delays_s=np.arange(n) * bin_s, power=power, bin_s=bin_s)


def cmd_simulate(cfg: PipelineConfig, args, out: Path) -> None:
    seq = read_keypoints_csv(args.keypoints)
    points = read_labeled_csv(args.points)
    for p in points:
        if p.part is None:
            raise ValueError("simulate requires labeled points (run cluster first)")
    per_snap = _group_by_snapshot(points, len(seq))
    rng = nnkit.make_rng((cfg.seed, 500))
    snaps = synthesize_sequence(seq, per_snap, cfg.rf, rng, smooth_window=cfg.smooth_window)
    write_cir_csv(out / "cir.csv", snaps)
    write_delay_profile_csv(out / "pdp.csv", _mean_pdp(snaps, cfg))
    times = np.array([s.time_s for s in snaps])
    write_rmsds_csv(out / "rmsds.csv", times, rmsds_timeseries(snaps))
    spec = None
    if len(snaps) >= cfg.stft.window_len:
        spec = stft_spectrogram(snaps, window_len=cfg.stft.window_len, hop=cfg.stft.hop)
        write_spectrogram_csv(out / "spectrogram.csv", spec)
    else:
        print(f"sequence shorter than one STFT window ({cfg.stft.window_len}); no spectrogram")
    if args.png:
        _write_png(out / "pdp.png", _mean_pdp(snaps, cfg).power[None, :])
        if spec is not None:
            _write_png(out / "spectrogram.png", np.flipud(spec.power.T))


def _write_png(path, power) -> None:
    """Grayscale rendering, log scale, floored 60 dB below the peak."""
    try:
        from PIL import Image
    except ImportError:
        raise ValueError("PNG rendering requires Pillow (install the 'png' extra)") from None
    p = np.asarray(power, dtype=float)
    peak = float(p.max()) if p.size and float(p.max()) > 0 else 1.0
    db = 10.0 * np.log10(np.maximum(p / peak, 1e-6))
    img = np.round((db + 60.0) / 60.0 * 255.0).astype(np.uint8)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        Image.fromarray(img, mode="L").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_evaluate(cfg: PipelineConfig, args, out: Path) -> None:
    seq = read_keypoints_csv(args.keypoints)
    n = len(seq)
    gen = _group_by_snapshot(_read_points_any(args.generated), n)
    truth = _group_by_snapshot(_read_points_any(args.truth), n)
    for side, name in ((gen, args.generated), (truth, args.truth)):
        for snap in side:
            for p in snap:
                if p.part is None:
                    raise ValueError(f"{name}: evaluation requires labeled points")

    rows = []  # (metric, part, value)
    for part, tv in pipeline.count_histogram_tv(gen, truth).items():
        rows.append(("count_tv", part.tag, tv))
    gen_feats = pipeline.part_feature_matrix(gen, seq, cfg.rf)
    truth_feats = pipeline.part_feature_matrix(truth, seq, cfg.rf)
    for part in gen_feats:
        g, t = gen_feats[part], truth_feats[part]
        if g.shape[0] == 0 or t.shape[0] == 0:
            continue
        deltas = pipeline.quartile_deltas(g, t)
        for j, feat in enumerate(("zeta", "beta", "gamma", "rcs_feature")):
            rows.append((f"quartile_delta_{feat}", part.tag, float(deltas[:, j].max())))
    for part, dist in pipeline.mean_matched_distance(gen, truth).items():
        rows.append(("matched_distance_m", part.tag, dist))

    rng_g = nnkit.make_rng((cfg.seed, 500))
    rng_t = nnkit.make_rng((cfg.seed, 500))
    snaps_g = synthesize_sequence(seq, gen, cfg.rf, rng_g, smooth_window=cfg.smooth_window)
    snaps_t = synthesize_sequence(seq, truth, cfg.rf, rng_t, smooth_window=cfg.smooth_window)
    err = pipeline.rmsds_error_series(snaps_g, snaps_t)
    finite = err[np.isfinite(err)]
    if finite.size:
        rows.append(("rmsds_error_p50_ns", "all", float(np.quantile(finite, 0.5)) * 1e9))
        rows.append(("rmsds_error_p90_ns", "all", float(np.quantile(finite, 0.9)) * 1e9))
        rows.append(("rmsds_error_max_ns", "all", float(finite.max()) * 1e9))
    rows.append(("rmsds_error_infinite_snapshots", "all", float(np.sum(~np.isfinite(err)))))
    if n >= cfg.stft.window_len:
        ridge = pipeline.ridge_error_bins(snaps_g, snaps_t, cfg.stft.window_len, cfg.stft.hop)
        rows.append(("ridge_error_bins", "all", ridge))

    lines = [version_header().rstrip("\n"), "metric,part,value"]
    for metric, part, value in rows:
        lines.append(f"{metric},{part},{fmt_float(value)}")
    atomic_write_text(out / "metrics.csv", "\n".join(lines) + "\n")


# ------------------------------------------------------------------- parsing

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults reproduce the reference setup)")
    common.add_argument("--seed", type=int, help="override the pipeline seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default 1, fully deterministic)")

    parser = argparse.ArgumentParser(
        prog="gesturechan",
        description="Gesture-conditioned scattering and channel synthesis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="render a synthetic corpus with known ground truth")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", parents=[common], help="align/resample keypoints and invert MPCs to points")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--mpc", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("cluster", parents=[common], help="track points over time and label them by body part")
    p.add_argument("--points", required=True)
    p.add_argument("--keypoints", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", parents=[common], help="fit the count network and per-part feature models")
    p.add_argument("--points", action="append", required=True, help="labeled points CSV (repeatable)")
    p.add_argument("--keypoints", action="append", required=True, help="matching keypoints CSV (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="sample scattering points for a keypoint sequence")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--keypoints", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", parents=[common], help="synthesize the channel: CIR, PDP, delay spread, spectrogram")
    p.add_argument("--points", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--png", action="store_true", help="also render grayscale PNGs (requires Pillow)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="compare generated points against ground truth")
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--keypoints", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.poisson_train.seed = args.seed
        cfg.cvae_train.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg.threads = args.threads
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_cfg(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_effective_config(out / "effective_config.ini", cfg)
        args.func(cfg, args, out)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {args.command}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
