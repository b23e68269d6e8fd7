"""Video quality metrics over a fixed random feature extractor.

Absolute values are only comparable within this package: the extractor is
a seed-pinned random 3D conv stack, not a pretrained action-recognition
network.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff.rng import Rng, derive_seed
from .autodiff.tensor import no_grad
from .errors import DataError, DimensionError, NumericError

log = logging.getLogger(__name__)

EXTRACTOR_SEED = 20240
FEATURE_DIM = 64
CSV_HEADER = ("lpips_surr", "fvd", "kvd")
REGULARIZATION = 1e-6


# -- feature extractor ------------------------------------------------------------

def _conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """x [T,H,W,C] channels-last, w [Cout,3,3,3,Cin]; zero padding 1 on all three axes.

    Time keeps stride 1; the spatial axes use ``stride``.
    """
    cout = w.shape[0]
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(0, 1, 2))[:, ::stride, ::stride]
    t, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3)).reshape(t * ho * wo, -1)
    out = cols @ w.reshape(cout, -1).T + b
    return out.reshape(t, ho, wo, cout)


class VideoFeatureNet:
    """Seed-pinned spatiotemporal conv stack: three 3x3x3 layers, ReLU, global average pool.

    ``T`` pins the clip length when given; frames are average-pooled to
    32x32 first so every room size shares the same weights.
    """

    widths = (16, 32, FEATURE_DIM)

    def __init__(self, seed: int = EXTRACTOR_SEED, T: Optional[int] = None, base: int = 32):
        self.seed = seed
        self.T = T
        self.base = base
        self.layers = []
        cin = 3
        for i, cout in enumerate(self.widths):
            rng = Rng(derive_seed(seed, "video-features", i))
            fan = 27 * cin
            w = rng.normal((cout, 3, 3, 3, cin), dtype=np.float64) * math.sqrt(2.0 / fan)
            b = rng.normal((cout,), dtype=np.float64) * 0.1
            self.layers.append((w, b))
            cin = cout

    @property
    def dim(self) -> int:
        return self.widths[-1]

    def _prepare(self, frames) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected a clip of shape (T, 3, S, S), got {x.shape}")
        if self.T is not None and x.shape[0] != self.T:
            raise DimensionError(f"extractor configured for {self.T} frames, clip has {x.shape[0]}")
        s = x.shape[-1]
        if s % self.base:
            raise DimensionError(f"frame size {s} is not a multiple of {self.base}")
        k = s // self.base
        t = x.shape[0]
        if k > 1:
            x = x.reshape(t, 3, self.base, k, self.base, k).mean(axis=(3, 5))
        return x.transpose(0, 2, 3, 1) - 0.5

    def feature_maps(self, frames) -> np.ndarray:
        h = self._prepare(frames)
        for w, b in self.layers:
            h = np.maximum(_conv3d(h, w, b, stride=2), 0.0)
        return h  # [T, 4, 4, D]

    def frame_features(self, frames) -> np.ndarray:
        """Per-frame spatially pooled features [T, D]."""
        return self.feature_maps(frames).mean(axis=(1, 2))

    def __call__(self, frames) -> np.ndarray:
        return self.feature_maps(frames).mean(axis=(0, 1, 2))


def extract_video_features(clips: Sequence[np.ndarray], net: Optional[VideoFeatureNet] = None,
                           workers: int = 1) -> np.ndarray:
    """Stack one D-vector per clip, [M, D]; extraction runs per clip on ``workers`` threads."""
    net = net or VideoFeatureNet()
    if workers > 1 and len(clips) > 1:
        with ThreadPoolExecutor(workers) as pool:
            feats = list(pool.map(net, clips))
    else:
        feats = [net(c) for c in clips]
    return np.stack(feats) if feats else np.zeros((0, net.dim))


# -- Gaussian statistics and distances ------------------------------------------------

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_stats(features: np.ndarray, reg: float = REGULARIZATION) -> GaussianStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise DataError(f"need at least two feature rows, got shape {f.shape}")
    if not np.isfinite(f).all():
        raise NumericError("features contain non-finite values")
    mu = f.mean(axis=0)
    d = f - mu
    cov = d.T @ d / (f.shape[0] - 1)
    cov = 0.5 * (cov + cov.T) + reg * np.eye(f.shape[1])
    return GaussianStats(mu, cov)


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigh; negative eigenvalues are clipped to 0."""
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the root is taken from the symmetric form
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues as ``S_a S_b``.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if not (np.isfinite(s.mean).all() and np.isfinite(s.cov).all()):
            raise NumericError("non-finite Gaussian statistics")
    ra = sqrtm_psd(a.cov)
    root = sqrtm_psd(ra @ b.cov @ ra)
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(root))
    return max(val, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kernel_distance(fa: np.ndarray, fb: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel.

    The two sets are put in a canonical order first, so swapping the
    arguments reproduces the value bit for bit.
    """
    x = np.asarray(fa, dtype=np.float64)
    y = np.asarray(fb, dtype=np.float64)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise DataError("kernel distance needs at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if (x.shape[0], x.tobytes()) > (y.shape[0], y.tobytes()):
        x, y = y, x
    m, n = x.shape[0], y.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


_PER_NET = None


def _perceptual_net():
    global _PER_NET
    if _PER_NET is None:
        from .lfae import PerceptualNet
        _PER_NET = PerceptualNet()
    return _PER_NET


def perceptual_distance(frame_a, frame_b) -> float:
    """Mean squared distance of fixed-net feature maps, averaged over the layers.

    Frames are [3,S,S] or a batch [B,3,S,S]; a batch returns the mean.
    """
    a = np.asarray(frame_a, dtype=np.float32)
    b = np.asarray(frame_b, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionError(f"perceptual_distance shapes differ: {a.shape} vs {b.shape}")
    net = _perceptual_net()
    with no_grad():
        # average the two orders so the value is symmetric bit for bit
        d1 = net.distance(a, b).item()
        d2 = net.distance(b, a).item()
    return 0.5 * (d1 + d2)


# -- directory-level evaluation ----------------------------------------------------------

def clip_ids_in(root) -> list[str]:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "exo").is_dir())


def load_exo_frames(root, clip_id: str) -> np.ndarray:
    from .worldsim import read_ppm
    paths = sorted((Path(root) / clip_id / "exo").glob("*.ppm"))
    if not paths:
        raise DataError(f"clip {clip_id} has no exo frames under {root}")
    return np.stack([read_ppm(p) for p in paths])


@dataclass
class Report:
    lpips_surr: float
    fvd: float
    kvd: float
    per_clip: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerow([_fmt(self.lpips_surr), _fmt(self.fvd), _fmt(self.kvd)])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def evaluate(gen_dir, ref_dir, out_csv=None, workers: int = 1, seed: int = EXTRACTOR_SEED) -> Report:
    """Compare generated clips against reference clips with the same ids.

    Every generated id must exist in the reference directory; reference
    clips that were not generated are ignored. Raises DataError listing the
    missing ids otherwise.
    """
    gen_ids = clip_ids_in(gen_dir)
    ref_ids = set(clip_ids_in(ref_dir))
    missing = [c for c in gen_ids if c not in ref_ids]
    if missing or not gen_ids:
        raise DataError(f"clip ids missing from reference: {', '.join(missing) or '(no generated clips)'}")
    if len(gen_ids) < 2:
        raise DataError("evaluation needs at least two clips for the distribution metrics")
    gen = [load_exo_frames(gen_dir, c) for c in gen_ids]
    ref = [load_exo_frames(ref_dir, c) for c in gen_ids]
    per_clip = {}
    for cid, g, r in zip(gen_ids, gen, ref):
        if g.shape != r.shape:
            raise DataError(f"clip {cid}: generated {g.shape} vs reference {r.shape}")
        per_clip[cid] = perceptual_distance(g, r)
    net = VideoFeatureNet(seed, T=gen[0].shape[0])
    fg = extract_video_features(gen, net, workers)
    fr = extract_video_features(ref, net, workers)
    report = Report(
        lpips_surr=float(np.mean([per_clip[c] for c in gen_ids])),
        fvd=frechet_distance(gaussian_stats(fg), gaussian_stats(fr)),
        kvd=kernel_distance(fg, fr),
        per_clip=per_clip,
    )
    if out_csv is not None:
        Path(out_csv).write_text(report.csv_text())
    return report


def corpus_fvd(clips_a: Sequence[np.ndarray], clips_b: Sequence[np.ndarray], seed: int = EXTRACTOR_SEED,
               workers: int = 1) -> float:
    """FVD between two clip corpora that need not share ids."""
    net = VideoFeatureNet(seed, T=clips_a[0].shape[0])
    fa = extract_video_features(clips_a, net, workers)
    fb = extract_video_features(clips_b, net, workers)
    return frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
