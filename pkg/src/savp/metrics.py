"""Held-out video metrics: PSNR, SSIM, random-feature similarity, diversity, best-of-N."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PSNR_CAP = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
METRICS = ("psnr", "ssim", "feature")


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim < 3:
        raise ValueError(f"frames must be [..., C, H, W], got {x.shape}")
    return x, y


def psnr(x, y, max_val: float = 1.0) -> np.ndarray:
    """Per-frame PSNR in dB over the trailing ``C, H, W`` axes, capped at 100."""
    x, y = _check_pair(x, y)
    mse = np.mean((x - y) ** 2, axis=(-3, -2, -1))
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(max_val**2 / mse)
    return np.minimum(val, PSNR_CAP)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the last two axes
    k = g.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim(x, y, window: int = 7, sigma: float = 1.5) -> np.ndarray:
    """Mean local SSIM per frame; channels are averaged to grayscale first."""
    x, y = _check_pair(x, y)
    x, y = x.mean(axis=-3), y.mean(axis=-3)
    if min(x.shape[-2:]) < window:
        raise ValueError(f"frame {x.shape[-2:]} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean(axis=(-2, -1))


# -- feature space -------------------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractorSpec:
    seed: int = 1234
    channels: int = 1
    widths: tuple = (16, 32, 32, 64, 64)
    kernel: int = 3
    slope: float = 0.2


class FeatureExtractor:
    """Frozen random conv stack; every stride-2 layer's activation is a tap."""

    def __init__(self, spec: FeatureExtractorSpec = FeatureExtractorSpec()):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        cin = spec.channels
        self.weights, self.biases = [], []
        for width in spec.widths:
            fan_in = cin * spec.kernel**2
            self.weights.append(rng.standard_normal((width, cin, spec.kernel, spec.kernel)) * np.sqrt(2.0 / fan_in))
            # nonzero biases keep blank frames away from the all-zero feature vector
            self.biases.append(rng.uniform(0.05, 0.15, size=width))
            cin = width

    def __call__(self, frames) -> list[np.ndarray]:
        """``frames[..., C, H, W]`` -> list of flattened taps ``[N, D_l]`` with N the leading size."""
        frames = np.asarray(frames, dtype=np.float64)
        lead = frames.shape[:-3]
        x = Tensor(frames.reshape((-1,) + frames.shape[-3:]))
        taps = []
        for w, b in zip(self.weights, self.biases):
            x = T.leaky_relu(T.conv2d(x, Tensor(w), Tensor(b), stride=2), self.spec.slope)
            taps.append(x.data.reshape(x.shape[0], -1).reshape(lead + (-1,)))
        return taps


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine over the last axis; 0 where either vector is zero.

    Identical nonzero vectors give exactly 1 (no rounding residue), so
    identical samples have zero distance.
    """
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    denom = na * nb
    cos = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    same = np.all(a == b, axis=-1) & (denom > 0)
    return np.where(same, 1.0, cos)


def feature_similarity_from_taps(fa: list, fb: list) -> np.ndarray:
    return np.mean([cosine_similarity(a, b) for a, b in zip(fa, fb)], axis=0)


def feature_similarity(x, y, extractor: FeatureExtractor) -> np.ndarray:
    """Per-frame cosine similarity of extractor features, averaged over the taps."""
    x, y = _check_pair(x, y)
    return feature_similarity_from_taps(extractor(x), extractor(y))


def diversity(samples, extractor: FeatureExtractor) -> float:
    """Mean over sample pairs and frames of ``1 - feature_similarity``.

    ``samples`` is ``[S, T, C, H, W]`` (one video's predictions).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("diversity needs at least two samples")
    taps = extractor(samples)
    dists = [
        1.0 - feature_similarity_from_taps([t[i] for t in taps], [t[j] for t in taps])
        for i, j in combinations(range(samples.shape[0]), 2)
    ]
    return float(np.mean(dists))


def metric_fn(name: str, extractor: Optional[FeatureExtractor] = None) -> Callable:
    if name == "psnr":
        return psnr
    if name == "ssim":
        return ssim
    if name == "feature":
        if extractor is None:
            raise ValueError("feature metric needs an extractor")
        return lambda x, y: feature_similarity(x, y, extractor)
    raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")


def best_of_n(ground_truth, samples, metric: Callable) -> tuple[int, np.ndarray]:
    """Pick the sample with the highest mean metric over the horizon; return its index and curve."""
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ValueError("best_of_n needs at least one sample")
    gt = np.broadcast_to(ground_truth, samples.shape)
    curves = metric(samples, gt)
    best = int(np.argmax(curves.mean(axis=-1)))
    return best, curves[best]


def averaged_prediction(samples) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    return samples.mean(axis=0)


# -- reports -------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # (video, timestep, metric, value)
    diversity: dict = field(default_factory=dict)  # video -> value
    n_samples: int = 0
    digest: str = ""

    def aggregate(self) -> list[tuple[int, str, float, float]]:
        groups: dict = {}
        for _, t, m, v in self.rows:
            groups.setdefault((t, m), []).append(v)
        out = []
        order = {m: i for i, m in enumerate(METRICS)}
        for (t, m) in sorted(groups, key=lambda k: (k[0], order.get(k[1], len(order)), k[1])):
            vals = np.asarray(groups[(t, m)], dtype=np.float64)
            err = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
            out.append((t, m, float(vals.mean()), err))
        return out


def evaluate(
    ground_truth,
    samples,
    metrics: Sequence[str] = METRICS,
    extractor: Optional[FeatureExtractor] = None,
    best_of: Optional[int] = None,
    first_timestep: int = 1,
) -> MetricsReport:
    """Best-of-N curves and diversity.

    ``ground_truth`` is ``[n, T, C, H, W]`` and ``samples`` ``[S, n, T, C, H, W]``;
    only the first ``best_of`` samples compete. Timesteps are numbered from
    ``first_timestep``.
    """
    gt = np.asarray(ground_truth)
    samples = np.asarray(samples)
    if samples.shape[1:] != gt.shape:
        raise ValueError(f"samples {samples.shape[1:]} do not align with ground truth {gt.shape}")
    if best_of is not None:
        if not 1 <= best_of <= samples.shape[0]:
            raise ValueError(f"best_of={best_of} with {samples.shape[0]} samples")
        samples = samples[:best_of]
    extractor = extractor or FeatureExtractor(FeatureExtractorSpec(channels=gt.shape[2]))
    report = MetricsReport(n_samples=samples.shape[0])
    for v in range(gt.shape[0]):
        for name in metrics:
            _, curve = best_of_n(gt[v], samples[:, v], metric_fn(name, extractor))
            for t, value in enumerate(curve):
                report.rows.append((v, t + first_timestep, name, float(value)))
        if samples.shape[0] >= 2:
            report.diversity[v] = diversity(samples[:, v], extractor)
    order = {m: i for i, m in enumerate(METRICS)}
    report.rows.sort(key=lambda r: (r[0], r[1], order.get(r[2], len(order))))
    return report


def report_write(report: MetricsReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video", "timestep", "metric", "value"])
        for v, t, m, val in report.rows:
            w.writerow([v, t, m, repr(val)])
    with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "metric", "mean", "stderr"])
        for t, m, mean, err in report.aggregate():
            w.writerow([t, m, repr(mean), repr(err)])
    with open(os.path.join(out_dir, "diversity.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video", "diversity"])
        for v in sorted(report.diversity):
            w.writerow([v, repr(report.diversity[v])])


def write_pgm(path, frame) -> None:
    """Binary 8-bit PGM of a ``[C, H, W]`` or ``[H, W]`` frame in [0, 1] (channels averaged)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=0)
    h, w = frame.shape
    pix = np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    # pixel bytes may themselves look like whitespace, so index from the end
    pix = np.frombuffer(data[len(data) - w * h :], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / maxval


def dump_frames(out_dir, video) -> list[str]:
    """Write ``frame_%03d.pgm`` for each frame of ``video[T, C, H, W]``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, frame in enumerate(np.asarray(video)):
        path = os.path.join(out_dir, f"frame_{t:03d}.pgm")
        write_pgm(path, frame)
        paths.append(path)
    return paths
