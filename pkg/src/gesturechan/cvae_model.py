"""Per-part conditional VAE over scattering-point features.

A point is described in its part's local frame by (zeta, beta, gamma,
rcs_feature) where rcs_feature is min-max normalized log10 RCS. The
condition stacks a gesture embedding (small CNN over the aligned pose),
the previously generated feature within the snapshot (delay-ranked) and
the temporally matched feature from the previous snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import nnkit
from .scatter_geom import RfConfig, ScatteringPoint
from .skeleton import (
    BodyPart,
    GestureSequence,
    KeypointId,
    N_KEYPOINTS,
    SkeletonFrame,
    local_frame,
)

FEATURE_DIM = 4
GESTURE_DIM = 8
COND_DIM = GESTURE_DIM + 2 * FEATURE_DIM  # gesture + prior + previous
LATENT_DIM = 10
FRAME_DIM = N_KEYPOINTS * 3
RCS_FLOOR_M2 = 1e-12


@dataclass
class CvaeTrainConfig:
    epochs: int = 250
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta_kl: float = 1.0
    latent_dim: int = LATENT_DIM
    seed: int = 0
    share_gesture_encoder: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training configuration")
        if self.beta_kl < 0:
            raise ValueError("negative KL weight")


@dataclass
class FeatureStats:
    """Normalization fitted on one part's training features."""

    coord_mean: np.ndarray  # (3,) over (zeta, beta, gamma)
    coord_std: np.ndarray   # (3,)
    rcs_log10_min: float
    rcs_log10_max: float
    frame_mean: np.ndarray  # (57,) over aligned keypoint coordinates
    frame_std: np.ndarray   # (57,)

    def normalize_feature(self, coords, rcs_m2):
        c = (np.asarray(coords, dtype=float) - self.coord_mean) / self.coord_std
        span = self.rcs_log10_max - self.rcs_log10_min
        span = span if span > 1e-12 else 1.0
        f = (math.log10(max(float(rcs_m2), RCS_FLOOR_M2)) - self.rcs_log10_min) / span
        return np.concatenate([c, [f]])

    def denormalize_feature(self, feature):
        feature = np.asarray(feature, dtype=float)
        coords = feature[:3] * self.coord_std + self.coord_mean
        span = self.rcs_log10_max - self.rcs_log10_min
        span = span if span > 1e-12 else 1.0
        rcs = 10.0 ** (self.rcs_log10_min + feature[3] * span)
        return coords, float(rcs)

    def normalize_frames(self, flats):
        return (np.atleast_2d(np.asarray(flats, dtype=float)) - self.frame_mean) / self.frame_std


def gesture_net_spec() -> list:
    return [
        {"kind": "conv", "filters": 16, "kh": 5, "kw": 1, "in_h": N_KEYPOINTS, "in_w": 3},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "n_in": 16 * (N_KEYPOINTS - 4) * 3, "n_out": GESTURE_DIM, "init": "he"},
    ]


def encoder_net_spec(latent_dim: int = LATENT_DIM) -> list:
    return [
        {"kind": "dense", "n_in": FEATURE_DIM + COND_DIM, "n_out": 256, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 256, "n_out": 128, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 128, "n_out": 64, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 64, "n_out": 2 * latent_dim, "init": "small"},
    ]


def decoder_net_spec(latent_dim: int = LATENT_DIM) -> list:
    return [
        {"kind": "dense", "n_in": latent_dim + COND_DIM, "n_out": 64, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 64, "n_out": 128, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 128, "n_out": 256, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 256, "n_out": FEATURE_DIM, "init": "small"},
    ]


@dataclass
class CvaeNet:
    """One part's generator: gesture encoder, feature encoder, decoder."""

    part: BodyPart
    ges_net: nnkit.Network
    enc_net: nnkit.Network
    dec_net: nnkit.Network
    stats: FeatureStats
    latent_dim: int = LATENT_DIM
    beta_kl: float = 1.0
    seed: int = 0
    epochs: int = 0

    def encode_gesture(self, frame_flats) -> np.ndarray:
        """Gesture embedding for aligned pose(s); (N, 8)."""
        xn = self.stats.normalize_frames(frame_flats)
        return self.ges_net.forward(xn.reshape(-1, N_KEYPOINTS, 3))

    def encode_raw(self, x, cond):
        """Posterior parameters (mu, logvar) for features under a condition."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        out = self.enc_net.forward(np.concatenate([x, cond], axis=1))
        return out[:, : self.latent_dim], out[:, self.latent_dim :]

    def encode(self, x, cond):
        """Posterior (mu, sigma); sigma = exp(logvar / 2) is always positive."""
        mu, logvar = self.encode_raw(x, cond)
        return mu, np.exp(0.5 * logvar)

    def decode(self, z, cond) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        return self.dec_net.forward(np.concatenate([z, cond], axis=1))

    def networks(self):
        return [self.ges_net, self.enc_net, self.dec_net]


def reparameterize(mu, sigma, eps) -> np.ndarray:
    """z = mu + sigma * eps."""
    return np.asarray(mu, dtype=float) + np.asarray(sigma, dtype=float) * np.asarray(eps, dtype=float)


def kl_gaussian(mu, logvar) -> float:
    """Closed-form KL(q || N(0, I)) averaged over the batch."""
    mu = np.atleast_2d(mu)
    logvar = np.atleast_2d(logvar)
    per_sample = 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=1)
    return float(per_sample.mean())


def elbo_terms(x, xhat, mu, logvar, beta_kl: float = 1.0):
    """(total, reconstruction, kl); reconstruction is plain MSE."""
    x = np.atleast_2d(x)
    xhat = np.atleast_2d(xhat)
    recon = float(np.mean((xhat - x) ** 2))
    kl = kl_gaussian(mu, logvar)
    return recon + beta_kl * kl, recon, kl


def cvae_loss(net: CvaeNet, x, cond, rng=None, eps=None):
    """Run the VAE forward pass and return (total, recon, kl).

    ``eps`` pins the reparameterization noise; otherwise it is drawn from
    ``rng``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mu, logvar = net.encode_raw(x, cond)
    if eps is None:
        if rng is None:
            rng = nnkit.make_rng(0)
        eps = rng.standard_normal(mu.shape)
    z = reparameterize(mu, np.exp(0.5 * logvar), eps)
    xhat = net.decode(z, cond)
    return elbo_terms(x, xhat, mu, logvar, net.beta_kl)


def _training_step(net: CvaeNet, opt, frames_flat, x, cpri, cpre, eps, train_encoder=True):
    """One joint forward/backward/Adam step; returns (total, recon, kl)."""
    n, d = x.shape
    cges = net.ges_net.forward(net.stats.normalize_frames(frames_flat).reshape(-1, N_KEYPOINTS, 3))
    cond = np.concatenate([cges, cpri, cpre], axis=1)
    enc_out = net.enc_net.forward(np.concatenate([x, cond], axis=1))
    mu = enc_out[:, : net.latent_dim]
    logvar = enc_out[:, net.latent_dim :]
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    xhat = net.dec_net.forward(np.concatenate([z, cond], axis=1))

    total, recon, kl = elbo_terms(x, xhat, mu, logvar, net.beta_kl)

    d_xhat = 2.0 * (xhat - x) / (n * d)
    d_dec_in = net.dec_net.backward(d_xhat)
    dz = d_dec_in[:, : net.latent_dim]
    dc_dec = d_dec_in[:, net.latent_dim :]

    beta = net.beta_kl
    dmu = dz + beta * mu / n
    dlogvar = dz * eps * 0.5 * sigma + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    d_enc_in = net.enc_net.backward(np.concatenate([dmu, dlogvar], axis=1))
    dc_enc = d_enc_in[:, FEATURE_DIM:]

    dcges = (dc_dec + dc_enc)[:, :GESTURE_DIM]
    params = net.enc_net.params() + net.dec_net.params()
    grads = net.enc_net.grads() + net.dec_net.grads()
    if train_encoder:
        net.ges_net.backward(dcges)
        params = net.ges_net.params() + params
        grads = net.ges_net.grads() + grads
    nnkit.adam_step(opt, params, grads)
    return total, recon, kl


@dataclass
class CvaeDataset:
    """Per-part training rows; conditions are in normalized feature space."""

    part: BodyPart
    frames_flat: np.ndarray  # (n, 57) raw aligned keypoint coordinates
    x: np.ndarray            # (n, 4) normalized features
    cpri: np.ndarray         # (n, 4)
    cpre: np.ndarray         # (n, 4)
    stats: FeatureStats

    def __len__(self):
        return self.x.shape[0]


def train_part(
    dataset: CvaeDataset,
    cfg: CvaeTrainConfig = None,
    gesture_encoder: Optional[nnkit.Network] = None,
    train_encoder: bool = True,
) -> CvaeNet:
    """Train one part's C-VAE.

    ``gesture_encoder`` injects a shared (possibly frozen) gesture net;
    by default each part trains its own copy end to end.
    """
    cfg = cfg or CvaeTrainConfig()
    if len(dataset) == 0:
        raise ValueError(f"insufficient data for part {dataset.part.tag}")
    rng = nnkit.make_rng((cfg.seed, 211, int(dataset.part)))
    ges = gesture_encoder
    if ges is None:
        ges = nnkit.build_network(gesture_net_spec(), rng=rng, input_shape=(N_KEYPOINTS, 3))
    enc = nnkit.build_network(encoder_net_spec(cfg.latent_dim), rng=rng, input_shape=(FEATURE_DIM + COND_DIM,))
    dec = nnkit.build_network(decoder_net_spec(cfg.latent_dim), rng=rng, input_shape=(cfg.latent_dim + COND_DIM,))
    net = CvaeNet(
        part=dataset.part,
        ges_net=ges,
        enc_net=enc,
        dec_net=dec,
        stats=dataset.stats,
        latent_dim=cfg.latent_dim,
        beta_kl=cfg.beta_kl,
        seed=cfg.seed,
        epochs=cfg.epochs,
    )
    opt = nnkit.AdamState(lr=cfg.learning_rate)
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            eps = rng.standard_normal((sel.size, cfg.latent_dim))
            _training_step(
                net,
                opt,
                dataset.frames_flat[sel],
                dataset.x[sel],
                dataset.cpri[sel],
                dataset.cpre[sel],
                eps,
                train_encoder=train_encoder,
            )
    return net


@dataclass
class GeneratedPathFeature:
    feature: np.ndarray    # normalized (4,)
    local_pos: np.ndarray  # meters in the part frame (3,)
    delay_s: float


@dataclass
class GenerationState:
    """Carries cross-snapshot context during sequential generation."""

    alignment_offset: np.ndarray
    prev: Dict[BodyPart, List[GeneratedPathFeature]] = field(default_factory=dict)
    prev_gamma: Dict[BodyPart, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_sequence(cls, seq: GestureSequence, reference=None):
        ref = np.zeros(3) if reference is None else np.asarray(reference, dtype=float)
        offset = ref - seq.frames[0].keypoint(KeypointId.BELLY)
        return cls(alignment_offset=offset)


def generate_points(
    nets: Dict[BodyPart, CvaeNet],
    frame: SkeletonFrame,
    counts,
    state: GenerationState,
    rng,
    rf: Optional[RfConfig] = None,
    match_gate_m: float = 0.15,
):
    """Sequentially decode one snapshot's scattering points.

    Per part: the intra-snapshot condition is the feature of the longest
    implied-delay point generated so far; the temporal condition is the
    nearest previous-snapshot feature (within the gate, in local
    coordinates) to the last drawn point. Zero vectors stand in whenever a
    condition is undefined, including the whole first snapshot.
    """
    rf = rf or RfConfig()
    counts = np.asarray(counts, dtype=int)
    if counts.shape != (len(BodyPart),):
        raise ValueError("counts must have one entry per part")
    if np.any(counts < 0):
        raise ValueError("negative count")
    aligned_flat = (frame.positions + state.alignment_offset).reshape(-1)
    points: List[ScatteringPoint] = []
    new_prev: Dict[BodyPart, List[GeneratedPathFeature]] = {}
    for part in BodyPart:
        net = nets.get(part)
        if net is None:
            raise ValueError(f"missing model for part {part.tag}")
        frame_r = local_frame(frame, part, rf.tx_position, fallback_gamma=state.prev_gamma.get(part))
        state.prev_gamma[part] = frame_r.gamma
        k = int(counts[int(part)])
        prev_feats = state.prev.get(part, [])
        cges = net.encode_gesture(aligned_flat)[0]
        cur: List[GeneratedPathFeature] = []
        last: Optional[GeneratedPathFeature] = None
        for _ in range(k):
            if cur:
                cpri = max(cur, key=lambda g: g.delay_s).feature
            else:
                cpri = np.zeros(FEATURE_DIM)
            cpre = np.zeros(FEATURE_DIM)
            if prev_feats:
                if last is None:
                    cpre = prev_feats[0].feature
                else:
                    dists = [np.linalg.norm(g.local_pos - last.local_pos) for g in prev_feats]
                    j = int(np.argmin(dists))
                    if dists[j] <= match_gate_m:
                        cpre = prev_feats[j].feature
            cond = np.concatenate([cges, cpri, cpre])
            z = rng.standard_normal(net.latent_dim)
            feat = net.decode(z, cond)[0]
            coords, rcs = net.stats.denormalize_feature(feat)
            pos = frame_r.to_global(coords)
            delay = 2.0 * float(np.linalg.norm(pos - rf.tx_position)) / rf.c0
            gen = GeneratedPathFeature(feature=feat, local_pos=coords, delay_s=delay)
            cur.append(gen)
            last = gen
            points.append(
                ScatteringPoint(position=pos, rcs_m2=rcs, snapshot=0, part=part, path_id=None)
            )
        new_prev[part] = sorted(cur, key=lambda g: g.delay_s)
    state.prev = new_prev
    return points, state


def checkpoint_payload(net: CvaeNet):
    spec = {
        "gesture": net.ges_net.spec(),
        "encoder": net.enc_net.spec(),
        "decoder": net.dec_net.spec(),
        "part": net.part.tag,
        "latent_dim": net.latent_dim,
        "beta_kl": net.beta_kl,
    }
    weights = np.concatenate(
        [net.ges_net.get_flat(), net.enc_net.get_flat(), net.dec_net.get_flat()]
    )
    norm_stats = {
        "coord_mean": net.stats.coord_mean,
        "coord_std": net.stats.coord_std,
        "rcs_log10_min": net.stats.rcs_log10_min,
        "rcs_log10_max": net.stats.rcs_log10_max,
        "frame_mean": net.stats.frame_mean,
        "frame_std": net.stats.frame_std,
    }
    return spec, weights, norm_stats


def save_part(path, net: CvaeNet) -> None:
    spec, weights, norm_stats = checkpoint_payload(net)
    nnkit.save_checkpoint(
        path,
        spec=spec,
        weights=weights,
        norm_stats=norm_stats,
        seed=net.seed,
        epochs=net.epochs,
        kind="cvae_part",
    )


def load_part(path) -> CvaeNet:
    payload = nnkit.load_checkpoint(path)
    if payload.get("kind") != "cvae_part":
        raise ValueError("not a feature-model checkpoint")
    spec = payload["spec"]
    ges = nnkit.build_network(spec["gesture"])
    enc = nnkit.build_network(spec["encoder"])
    dec = nnkit.build_network(spec["decoder"])
    w = payload["weights"]
    n_ges, n_enc = ges.n_params(), enc.n_params()
    ges.set_flat(w[:n_ges])
    enc.set_flat(w[n_ges : n_ges + n_enc])
    dec.set_flat(w[n_ges + n_enc :])
    stats_raw = payload["norm_stats"]
    stats = FeatureStats(
        coord_mean=np.array(stats_raw["coord_mean"], dtype=float),
        coord_std=np.array(stats_raw["coord_std"], dtype=float),
        rcs_log10_min=float(stats_raw["rcs_log10_min"]),
        rcs_log10_max=float(stats_raw["rcs_log10_max"]),
        frame_mean=np.array(stats_raw["frame_mean"], dtype=float),
        frame_std=np.array(stats_raw["frame_std"], dtype=float),
    )
    return CvaeNet(
        part=BodyPart.from_tag(spec["part"]),
        ges_net=ges,
        enc_net=enc,
        dec_net=dec,
        stats=stats,
        latent_dim=int(spec["latent_dim"]),
        beta_kl=float(spec["beta_kl"]),
        seed=payload.get("seed") or 0,
        epochs=payload.get("epochs") or 0,
    )
