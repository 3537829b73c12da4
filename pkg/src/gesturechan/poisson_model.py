"""Per-part scattering-point count model: a dense network mapping an aligned
pose to six Poisson rates, trained with the Poisson negative log-likelihood.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nnkit
from .fileio import atomic_write_text, fmt_float, iter_data_lines, version_header
from .skeleton import BodyPart, KeypointId, N_KEYPOINTS, SkeletonFrame

N_PARTS = len(BodyPart)
INPUT_DIM = N_KEYPOINTS * 3
_ALIGNMENT_SLACK_M = 0.75


@dataclass
class CountSample:
    """Realized per-part point counts for one snapshot."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (N_PARTS,):
            raise ValueError(f"expected ({N_PARTS},) counts")
        if np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("counts must be non-negative integers")
        self.counts = c.astype(int)


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 64
    learning_rate: float = 1e-3
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training configuration")


def poisson_nll(rates, counts, eps: float = nnkit.LOG_EPS) -> float:
    """Mean over the batch of sum_j (lambda_j - k_j log(lambda_j + eps))."""
    lam = np.asarray(rates, dtype=float)
    k = np.asarray(counts, dtype=float)
    if lam.shape != k.shape:
        raise ValueError("rates/counts shape mismatch")
    if np.any(lam <= 0):
        raise ValueError("rates must be positive")
    if np.any(k < 0) or not np.all(np.equal(np.mod(k, 1), 0)):
        raise ValueError("counts must be non-negative integers")
    lam2 = np.atleast_2d(lam)
    k2 = np.atleast_2d(k)
    per_sample = np.sum(lam2 - k2 * np.log(lam2 + eps), axis=1)
    return float(per_sample.mean())


def poisson_nll_grad(rates, counts, eps: float = nnkit.LOG_EPS) -> np.ndarray:
    """Gradient of ``poisson_nll`` with respect to the rates."""
    lam = np.atleast_2d(np.asarray(rates, dtype=float))
    k = np.atleast_2d(np.asarray(counts, dtype=float))
    return (1.0 - k / (lam + eps)) / lam.shape[0]


def build_count_net_spec() -> list:
    return [
        {"kind": "dense", "n_in": INPUT_DIM, "n_out": 512, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 512, "n_out": 128, "init": "he"},
        {"kind": "relu"},
        {"kind": "dense", "n_in": 128, "n_out": N_PARTS, "init": "small"},
        {"kind": "exp"},
    ]


@dataclass
class PoissonNet:
    """Trained rate predictor plus its input normalization."""

    net: nnkit.Network
    input_mean: np.ndarray
    input_std: np.ndarray
    seed: int = 0
    epochs: int = 0

    def _check_aligned(self, flat: np.ndarray) -> None:
        belly = flat[..., 3 * int(KeypointId.BELLY) : 3 * int(KeypointId.BELLY) + 3]
        if np.any(np.linalg.norm(np.atleast_2d(belly), axis=1) > _ALIGNMENT_SLACK_M):
            raise ValueError("frame does not look aligned (belly far from origin)")

    def predict_rates(self, frame) -> np.ndarray:
        """Six positive rates for one aligned skeleton frame."""
        pos = frame.positions if isinstance(frame, SkeletonFrame) else np.asarray(frame, dtype=float)
        flat = pos.reshape(-1)
        if flat.shape != (INPUT_DIM,):
            raise ValueError("bad frame shape")
        if not np.all(np.isfinite(flat)):
            raise ValueError("non-finite frame")
        self._check_aligned(flat)
        return self.predict_rates_batch(flat[None])[0]

    def predict_rates_batch(self, flats: np.ndarray) -> np.ndarray:
        x = (np.asarray(flats, dtype=float) - self.input_mean) / self.input_std
        return self.net.forward(x)


def _normalize_stats(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def _dataset_arrays(dataset) -> Tuple[np.ndarray, np.ndarray]:
    xs, ks = [], []
    for frame, counts in dataset:
        pos = frame.positions if isinstance(frame, SkeletonFrame) else np.asarray(frame, dtype=float)
        xs.append(pos.reshape(-1))
        c = counts.counts if isinstance(counts, CountSample) else np.asarray(counts)
        ks.append(CountSample(c).counts)
    return np.array(xs, dtype=float), np.array(ks, dtype=float)


def train(dataset, cfg: TrainConfig = None) -> PoissonNet:
    """Fit the count network on (frame, counts) pairs.

    Frames must already be aligned; batches are drawn with a seeded shuffle
    so two runs with the same config produce bit-identical weights.
    """
    cfg = cfg or TrainConfig()
    x, k = _dataset_arrays(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    mean, std = _normalize_stats(x)
    xn = (x - mean) / std
    rng = nnkit.make_rng((cfg.seed, 101))
    net = nnkit.build_network(build_count_net_spec(), rng=rng, input_shape=(INPUT_DIM,))
    opt = nnkit.AdamState(lr=cfg.learning_rate, eps=cfg.eps)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            rates = net.forward(xn[sel])
            g = poisson_nll_grad(rates, k[sel], eps=cfg.eps)
            net.backward(g)
            nnkit.adam_step(opt, net.params(), net.grads())
    return PoissonNet(net=net, input_mean=mean, input_std=std, seed=cfg.seed, epochs=cfg.epochs)


def sample_counts(rates, rng) -> np.ndarray:
    """Draw one Poisson count per rate (Knuth below 30, normal approx above)."""
    lam = np.asarray(rates, dtype=float)
    if np.any(lam < 0):
        raise ValueError("negative rate")
    flat = lam.reshape(-1)
    out = np.empty(flat.shape, dtype=int)
    for i, l in enumerate(flat):
        out[i] = _sample_one(float(l), rng)
    return out.reshape(lam.shape)


def _sample_one(lam: float, rng) -> int:
    if lam <= 0.0:
        return 0
    if lam < 30.0:
        limit = math.exp(-lam)
        k = 0
        p = 1.0
        while True:
            p *= rng.random()
            if p <= limit:
                return k
            k += 1
    while True:
        k = math.floor(lam + math.sqrt(lam) * rng.standard_normal() + 0.5)
        if k >= 0:
            return int(k)


def total_variation(counts_a: Sequence[int], counts_b: Sequence[int]) -> float:
    """TV distance between two empirical count histograms."""
    a = np.asarray(counts_a, dtype=int)
    b = np.asarray(counts_b, dtype=int)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    hi = int(max(a.max(), b.max()))
    pa = np.bincount(a, minlength=hi + 1) / a.size
    pb = np.bincount(b, minlength=hi + 1) / b.size
    return 0.5 * float(np.abs(pa - pb).sum())


@dataclass
class CountWindowReport:
    window_start_snapshot: int
    part: BodyPart
    tv_distance: float
    lambda_hat_mean: float


def evaluate_count_distribution(
    model,
    frames,
    true_counts: np.ndarray,
    window: int = 10,
    draws: int = 100,
    rng=None,
) -> List[CountWindowReport]:
    """Compare drawn counts against ground truth over disjoint windows.

    For each disjoint window the model is queried at the middle frame (the
    gesture is treated as constant within a window), sampled ``draws`` times
    per part, and the empirical histogram is compared to the window's true
    counts by total-variation distance.
    """
    if rng is None:
        rng = nnkit.make_rng(0)
    if window < 1:
        raise ValueError("window must be >= 1")
    seq = getattr(frames, "frames", frames)
    true_counts = np.asarray(true_counts, dtype=int)
    if true_counts.shape[0] != len(seq):
        raise ValueError("true_counts length mismatch")
    reports: List[CountWindowReport] = []
    n_windows = len(seq) // window
    for w in range(n_windows):
        start = w * window
        mid = start + window // 2
        lam = np.asarray(model.predict_rates(seq[mid]), dtype=float)
        for part in BodyPart:
            sampled = sample_counts(np.full(draws, lam[int(part)]), rng)
            tv = total_variation(true_counts[start : start + window, int(part)], sampled)
            reports.append(
                CountWindowReport(
                    window_start_snapshot=start,
                    part=part,
                    tv_distance=tv,
                    lambda_hat_mean=float(lam[int(part)]),
                )
            )
    return reports


COUNT_REPORT_FIELDS = ["window_start_snapshot", "part", "tv_distance", "lambda_hat_mean"]


def write_count_report_csv(path, reports) -> None:
    buf = io.StringIO()
    buf.write(version_header())
    writer = csv.writer(buf)
    writer.writerow(COUNT_REPORT_FIELDS)
    for r in reports:
        writer.writerow(
            [
                str(int(r.window_start_snapshot)),
                r.part.tag,
                fmt_float(r.tv_distance),
                fmt_float(r.lambda_hat_mean),
            ]
        )
    atomic_write_text(path, buf.getvalue())


def read_count_report_csv(path) -> List[CountWindowReport]:
    out = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(iter_data_lines(fh))
        header = next(reader, None)
        if header != COUNT_REPORT_FIELDS:
            raise ValueError(f"{path}: unexpected count report header")
        for row in reader:
            out.append(
                CountWindowReport(
                    window_start_snapshot=int(row[0]),
                    part=BodyPart.from_tag(row[1]),
                    tv_distance=float(row[2]),
                    lambda_hat_mean=float(row[3]),
                )
            )
    return out


def save(path, model: PoissonNet) -> None:
    nnkit.save_checkpoint(
        path,
        spec=model.net.spec(),
        weights=model.net.get_flat(),
        norm_stats={"input_mean": model.input_mean, "input_std": model.input_std},
        seed=model.seed,
        epochs=model.epochs,
        kind="poisson_counts",
    )


def load(path) -> PoissonNet:
    payload = nnkit.load_checkpoint(path)
    if payload.get("kind") != "poisson_counts":
        raise ValueError("not a count-model checkpoint")
    net = nnkit.build_network(payload["spec"])
    net.set_flat(payload["weights"])
    stats = payload["norm_stats"]
    return PoissonNet(
        net=net,
        input_mean=np.array(stats["input_mean"], dtype=float),
        input_std=np.array(stats["input_std"], dtype=float),
        seed=payload.get("seed") or 0,
        epochs=payload.get("epochs") or 0,
    )
