"""Stage 1: latent flow autoencoder.

An image encoder maps a frame to a latent map at 1/4 resolution, a flow
head predicts backward flow and occlusion between two frames, the latent of
the source frame is warped and gated, and a decoder maps it back to pixels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Init, Module, ResBlock
from .autodiff.optim import OptimizerState, adam_step
from .autodiff.rng import Rng, derive_seed
from .autodiff.tensor import Tensor, as_tensor, no_grad
from .errors import DimensionError

log = logging.getLogger(__name__)

PERCEPTUAL_SEED = 0
OCC_BIAS = 3.0


@dataclass
class Stage1Config:
    S: int = 64
    c_lat: int = 16
    width: int = 16  # first stage width; the second stage doubles it
    flow_scale: float = 1.0
    lam: float = 0.1
    lr: float = 1e-3
    iterations: int = 600
    batch: int = 8
    log_every: int = 10
    ckpt_every: int = 0  # 0: only the final checkpoint
    eval_clips: int = 16

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("perceptual weight must be non-negative")


class PerceptualNet(Module):
    """Fixed random three-layer conv net standing in for VGG features."""

    def __init__(self, seed: int = PERCEPTUAL_SEED, widths=(8, 16, 16)):
        init = Init(seed, "per")
        w1, w2, w3 = widths
        # gain 2 over He init so the feature term is not negligible next to L_rec
        self.l1 = Conv2d(init.sub("l1"), 3, w1, std=2 * math.sqrt(2 / 27), trainable=False)
        self.l2 = Conv2d(init.sub("l2"), w1, w2, stride=2, std=2 * math.sqrt(2 / (9 * w1)), trainable=False)
        self.l3 = Conv2d(init.sub("l3"), w2, w3, stride=2, std=2 * math.sqrt(2 / (9 * w2)), trainable=False)

    def features(self, x: Tensor) -> list[Tensor]:
        f1 = ops.relu(self.l1(x))
        f2 = ops.relu(self.l2(f1))
        f3 = ops.relu(self.l3(f2))
        return [f1, f2, f3]

    def distance(self, a, b) -> Tensor:
        """Mean squared feature distance, averaged over the three layers."""
        fa, fb = self.features(as_tensor(a)), self.features(as_tensor(b))
        terms = [ops.mse(x, y) for x, y in zip(fa, fb)]
        return ops.mul(terms[0] + terms[1] + terms[2], 1.0 / 3.0)


class _Down(Module):
    """Two stride-2 residual stages followed by a 1x1 projection."""

    def __init__(self, init: Init, cin: int, width: int, cout: int):
        self.s1 = Conv2d(init.sub("s1"), cin, width, stride=2)
        self.r1 = ResBlock(init.sub("r1"), width, width)
        self.s2 = Conv2d(init.sub("s2"), width, 2 * width, stride=2)
        self.r2 = ResBlock(init.sub("r2"), 2 * width, 2 * width)
        self.proj = Conv2d(init.sub("proj"), 2 * width, cout, k=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.r1(self.s1(x))
        h = self.r2(self.s2(h))
        return self.proj(ops.silu(h))


class Decoder(Module):
    def __init__(self, init: Init, c_lat: int, width: int):
        self.proj = Conv2d(init.sub("proj"), c_lat, 2 * width, k=1)
        self.r1 = ResBlock(init.sub("r1"), 2 * width, 2 * width)
        self.u1 = Conv2d(init.sub("u1"), 2 * width, width)
        self.r2 = ResBlock(init.sub("r2"), width, width)
        self.out = Conv2d(init.sub("out"), width, 3)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.r1(self.proj(z))
        h = self.r2(self.u1(ops.upsample2x(h)))
        return ops.sigmoid(self.out(ops.upsample2x(ops.silu(h))))


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


def warp(z, flow, occ) -> Tensor:
    """Gate the backward-warped latent: ``occ * grid_sample(z, flow)``."""
    z, flow, occ = as_tensor(z), as_tensor(flow), as_tensor(occ)
    if z.shape[-2:] != flow.shape[-2:] or z.shape[-2:] != occ.shape[-2:]:
        raise DimensionError(f"warp: latent {z.shape}, flow {flow.shape}, occlusion {occ.shape} disagree")
    return ops.mul(occ, ops.grid_sample_bilinear(z, flow))


class LatentFlowAE(Module):
    def __init__(self, cfg: Stage1Config, seed: int = 0):
        self.cfg = cfg
        init = Init(seed, "lfae")
        self.enc = _Down(init.sub("enc"), 3, cfg.width, cfg.c_lat)
        self.flow = _Down(init.sub("flow"), 6, cfg.width, 3)
        # start from the identity warp (f = 0, m close to 1); a random initial flow
        # lets the decoder learn to undo a constant shift instead of the flow learning motion
        self.flow.proj.w.data[...] = 0
        self.flow.proj.b.data[...] = 0
        self.flow.proj.b.data[2] = OCC_BIAS
        self.dec = Decoder(init.sub("dec"), cfg.c_lat, cfg.width)

    def _check_frame(self, x: Tensor) -> None:
        S = self.cfg.S
        if x.shape[-3:] != (3, S, S):
            raise DimensionError(f"expected frames of shape (3, {S}, {S}), got {x.shape}")

    def encode(self, frame) -> Tensor:
        x, squeeze = _batched(frame)
        self._check_frame(x)
        return _unbatch(self.enc(x), squeeze)

    def estimate_flow(self, frame_i, frame_j) -> tuple[Tensor, Tensor]:
        """Backward flow [.,2,h,w] and occlusion [.,1,h,w] from frame j to frame i."""
        xi, squeeze = _batched(frame_i)
        xj, _ = _batched(frame_j)
        self._check_frame(xi)
        if xi.shape != xj.shape:
            raise DimensionError(f"estimate_flow: frame shapes differ {xi.shape} vs {xj.shape}")
        out = self.flow(ops.concat([xi, xj], axis=1))
        f = ops.mul(ops.tanh(out[:, 0:2]), self.cfg.flow_scale)
        m = ops.sigmoid(out[:, 2:3])
        return _unbatch(f, squeeze), _unbatch(m, squeeze)

    def decode(self, z) -> Tensor:
        z, squeeze = _batched(z)
        h = self.cfg.S // 4
        if z.shape[1:] != (self.cfg.c_lat, h, h):
            raise DimensionError(f"decode expects latents ({self.cfg.c_lat}, {h}, {h}), got {z.shape}")
        return _unbatch(self.dec(z), squeeze)

    def reconstruct(self, frame_i, frame_j) -> Tensor:
        f, m = self.estimate_flow(frame_i, frame_j)
        return self.decode(warp(self.encode(frame_i), f, m))


def stage1_terms(model: LatentFlowAE, per: PerceptualNet, frame_i, frame_j) -> tuple[Tensor, Tensor]:
    """(L_rec, L_per) for reconstructing ``frame_j`` from ``frame_i``."""
    target = as_tensor(frame_j)
    recon = model.reconstruct(frame_i, frame_j)
    return ops.mse(recon, target), per.distance(recon, target)


def stage1_loss(model: LatentFlowAE, per: PerceptualNet, frame_i, frame_j) -> Tensor:
    l_rec, l_per = stage1_terms(model, per, frame_i, frame_j)
    if model.cfg.lam == 0:
        return l_rec
    return l_rec + ops.mul(l_per, model.cfg.lam)


# -- training -------------------------------------------------------------

def load_frames(dataset, ids) -> dict[str, np.ndarray]:
    """Exo frames [T,3,S,S] for each clip id."""
    return {cid: dataset.load_clip(cid).exo for cid in ids}


def eval_pairs(frames: dict, n_clips: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed held-out (i, j) pairs: first/last frame plus one random pair per clip."""
    rng = Rng(derive_seed(seed, "stage1-eval"))
    src, dst = [], []
    for cid in sorted(frames)[:n_clips]:
        clip = frames[cid]
        T = clip.shape[0]
        i, j = rng.integers(0, T), rng.integers(0, T)
        for a, b in ((0, T - 1), (i, j)):
            src.append(clip[a])
            dst.append(clip[b])
    return np.stack(src), np.stack(dst)


def evaluate_stage1(model, per, src: np.ndarray, dst: np.ndarray, chunk: int = 16) -> tuple[float, float]:
    with no_grad():
        rec = pl = 0.0
        for s in range(0, len(src), chunk):
            a, b = stage1_terms(model, per, src[s:s + chunk], dst[s:s + chunk])
            n = len(src[s:s + chunk])
            rec += a.item() * n
            pl += b.item() * n
        return rec / len(src), pl / len(src)


def train_stage1(dataset, cfg: Stage1Config, seed: int, out_dir, train_ids=None, test_ids=None,
                 save=None) -> tuple[LatentFlowAE, PerceptualNet, dict]:
    """Train the autoencoder; returns (model, perceptual net, summary).

    ``save(path, model, per, meta)`` writes checkpoints; the final one is
    ``out_dir/stage1.ckpt``. Loss rows go to ``out_dir/train_log.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ids = train_ids if train_ids is not None else dataset.ids("train")
    test_ids = test_ids if test_ids is not None else dataset.ids("test")
    model = LatentFlowAE(cfg, seed)
    per = PerceptualNet()
    frames = load_frames(dataset, train_ids)
    held = load_frames(dataset, test_ids[: cfg.eval_clips])
    ev_src, ev_dst = eval_pairs(held, cfg.eval_clips, seed)
    init_rec, init_per = evaluate_stage1(model, per, ev_src, ev_dst)
    init_total = init_rec + cfg.lam * init_per
    log.info("stage1 init: held-out L_rec=%.5f L_per=%.5f (lambda*L_per=%.5f)", init_rec, init_per,
             cfg.lam * init_per)
    params = model.parameters()
    opt = OptimizerState(lr=cfg.lr)
    rng = Rng(derive_seed(seed, "stage1-batches"))
    ids = sorted(frames)
    T = frames[ids[0]].shape[0]
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "l_rec", "l_per", "total"])
        for it in range(1, cfg.iterations + 1):
            picks = rng.integers(0, len(ids), (cfg.batch,))
            pi = rng.integers(0, T, (cfg.batch,))
            pj = rng.integers(0, T, (cfg.batch,))
            if (pi == pj).any():
                log.debug("iter %d: %d degenerate pairs (i == j)", it, int((pi == pj).sum()))
            src = np.stack([frames[ids[k]][i] for k, i in zip(picks, pi)])
            dst = np.stack([frames[ids[k]][j] for k, j in zip(picks, pj)])
            l_rec, l_per = stage1_terms(model, per, src, dst)
            total = l_rec + ops.mul(l_per, cfg.lam) if cfg.lam else l_rec
            total.backward()
            adam_step(params, opt)
            if it % cfg.log_every == 0 or it == cfg.iterations:
                writer.writerow([it, f"{l_rec.item():.6g}", f"{l_per.item():.6g}", f"{total.item():.6g}"])
            if save is not None and cfg.ckpt_every and it % cfg.ckpt_every == 0 and it < cfg.iterations:
                save(out_dir / f"stage1_{it:06d}.ckpt", model, per)
    final_rec, final_per = evaluate_stage1(model, per, ev_src, ev_dst)
    summary = {
        "init_total": init_total, "final_total": final_rec + cfg.lam * final_per,
        "init_rec": init_rec, "final_rec": final_rec,
    }
    log.info("stage1 done: held-out L_stage1 %.5f -> %.5f", summary["init_total"], summary["final_total"])
    if save is not None:
        save(out_dir / "stage1.ckpt", model, per)
    return model, per, summary
