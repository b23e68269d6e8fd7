"""Conditional DDPM over latent flow and occlusion sequences.

The diffusion state of one clip is ``x[T, 3, h, w]`` holding per-frame
backward flow (two channels) and the occlusion map rescaled to ``2m - 1``.
The denoiser predicts the clean state directly; sampling uses the exact
Gaussian posterior mean with the posterior variance.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Init, LayerNorm, Linear, Module, ResBlock, sinusoidal_embedding
from .autodiff.optim import OptimizerState, adam_step
from .autodiff.rng import Rng, derive_seed
from .autodiff.tensor import Tensor, as_tensor, default_dtype, no_grad
from .cfpm import AttentionParams, align_loss, attend
from .conditioning import ConditionBundle, CondConfig, Conditioner
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

CLAMP = 2.0
DM_LOSSES = ("l2sq", "l2", "l1")


# -- schedule ---------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Tables indexed by step ``n`` in 0..N; entry 0 is the clean state (abar_0 = 1)."""

    betas: np.ndarray
    alphas: np.ndarray
    abar: np.ndarray
    sigma2: np.ndarray
    coef_xn: np.ndarray
    coef_x0: np.ndarray

    @property
    def N(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
        a = 1.0 - b
        abar = np.cumprod(a)
        abar[0] = 1.0
        n = len(b) - 1
        sigma2 = np.zeros(n + 1)
        cx = np.zeros(n + 1)
        c0 = np.zeros(n + 1)
        for k in range(1, n + 1):
            den = 1.0 - abar[k]
            if den <= 0.0:
                # no noise up to this step: the chain is the identity
                cx[k], c0[k] = 1.0, 0.0
                continue
            sigma2[k] = (1.0 - abar[k - 1]) / den * b[k]
            cx[k] = math.sqrt(a[k]) * (1.0 - abar[k - 1]) / den
            c0[k] = math.sqrt(abar[k - 1]) * b[k] / den
        # the last reverse step returns the clean estimate exactly
        sigma2[1], cx[1] = 0.0, 0.0
        if 1.0 - abar[1] > 0.0:
            c0[1] = 1.0
        return cls(b, a, abar, sigma2, cx, c0)

    def check_step(self, n) -> np.ndarray:
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.N):
            raise ValueError(f"diffusion step out of range 1..{self.N}: {n}")
        return n


def make_schedule(N: int = 100, beta_min: float = 1e-4, beta_max: float = 0.1) -> NoiseSchedule:
    """Linear betas from ``beta_min`` to ``beta_max``."""
    if N < 1 or not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"invalid schedule: N={N}, beta range [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, N) if N > 1 else np.array([beta_min])
    return NoiseSchedule.from_betas(betas)


def _per_sample(table: np.ndarray, n, ndim: int) -> np.ndarray:
    v = table[np.asarray(n)]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, n, eps, sched: NoiseSchedule):
    """``sqrt(abar_n) x0 + sqrt(1 - abar_n) eps``; ``n`` is a step or one step per leading row."""
    n = sched.check_step(n)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    ab = _per_sample(sched.abar, n, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.result_type(x0, eps), copy=False)


def posterior_mean(x_n, x0_hat, n, sched: NoiseSchedule):
    """Mean of q(x_{n-1} | x_n, x0) evaluated at the estimate ``x0_hat``."""
    n = sched.check_step(n)
    x_n = np.asarray(x_n)
    x0_hat = np.asarray(x0_hat)
    cx = _per_sample(sched.coef_xn, n, x_n.ndim)
    c0 = _per_sample(sched.coef_x0, n, x_n.ndim)
    return (cx * x_n + c0 * x0_hat).astype(x_n.dtype, copy=False)


def denoise_step(predict: Callable, x_n: np.ndarray, n: int, cond, sched: NoiseSchedule,
                 rngs: list[Rng]) -> np.ndarray:
    """One reverse step. ``predict(x_n, n, cond)`` returns the clean estimate.

    ``rngs`` holds one stream per leading (batch) row of ``x_n``.
    """
    sched.check_step(n)
    x0_hat = np.clip(np.asarray(predict(x_n, n, cond)), -CLAMP, CLAMP).astype(x_n.dtype, copy=False)
    mean = posterior_mean(x_n, x0_hat, n, sched)
    if n == 1:
        return x0_hat
    sigma = math.sqrt(sched.sigma2[n])
    noise = np.stack([r.normal(x_n.shape[1:], dtype=x_n.dtype) for r in rngs])
    return (mean + sigma * noise).astype(x_n.dtype, copy=False)


def _row_streams(seed, rows: int) -> list[Rng]:
    if isinstance(seed, (list, tuple)):
        if len(seed) != rows:
            raise ValueError(f"{len(seed)} seeds for {rows} rows")
        return [Rng(derive_seed(s, "sample")) for s in seed]
    return [Rng(derive_seed(seed, "sample", b)) for b in range(rows)]


def sample_loop(predict: Callable, shape: tuple, cond, sched: NoiseSchedule, seed,
                dump: Optional[Callable] = None) -> np.ndarray:
    """Run the reverse chain N..1 from pure noise.

    ``seed`` is one integer (row ``b`` uses stream (seed, b)) or one seed per row.
    """
    rngs = _row_streams(seed, shape[0])
    x = np.stack([r.normal(shape[1:], dtype=default_dtype()) for r in rngs])
    for n in range(sched.N, 0, -1):
        x = denoise_step(predict, x, n, cond, sched, rngs)
        if dump is not None:
            dump(n, x)
    return x


def pack_state(flow: np.ndarray, occ: np.ndarray) -> np.ndarray:
    """[..., 2, h, w] flow and [..., 1, h, w] occlusion -> [..., 3, h, w] with m' = 2m - 1."""
    return np.concatenate([flow, 2.0 * occ - 1.0], axis=-3)


def unpack_state(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flow = x[..., 0:2, :, :]
    occ = np.clip((x[..., 2:3, :, :] + 1.0) / 2.0, 0.0, 1.0)
    return flow, occ


# -- denoiser -------------------------------------------------------------------

class AttnBlock(Module):
    """Pre-norm residual attention; keys/values come from ``context`` when given."""

    def __init__(self, init: Init, width: int, heads: int, ctx_norm: bool = False):
        self.ln = LayerNorm(init.sub("ln"), width)
        self.ctx_ln = LayerNorm(init.sub("ctx_ln"), width) if ctx_norm else None
        self.attn = AttentionParams(init.sub("attn"), width, heads)
        self.out = Linear(init.sub("out"), width, width, std=0.5 / math.sqrt(width))

    def __call__(self, x: Tensor, context: Optional[Tensor] = None, pos: Optional[Tensor] = None) -> Tensor:
        h = self.ln(x)
        q = h if pos is None else h + pos
        if context is None:
            kv, k = h, q
        else:
            kv = self.ctx_ln(context) if self.ctx_ln is not None else context
            k = kv
        return x + self.out(attend(q, k, kv, self.attn))


@dataclass
class DenoiserConfig:
    c_lat: int = 16
    base: int = 32
    width: int = 64  # bottleneck width, equal to the condition token width
    heads: int = 4
    emb: int = 64


class Denoiser(Module):
    """Per-frame U-Net with bottleneck spatial, temporal and cross attention."""

    def __init__(self, cfg: DenoiserConfig, init: Init):
        self.cfg = cfg
        b, w, e = cfg.base, cfg.width, cfg.emb
        self.t1 = Linear(init.sub("t1"), e // 2, e)
        self.t2 = Linear(init.sub("t2"), e, e)
        self.frame = Linear(init.sub("frame"), e // 2, e)
        self.inp = Conv2d(init.sub("inp"), 3 + cfg.c_lat, b)
        self.d1 = ResBlock(init.sub("d1"), b, b, e)
        self.s1 = Conv2d(init.sub("s1"), b, w, stride=2)
        self.d2 = ResBlock(init.sub("d2"), w, w, e)
        self.s2 = Conv2d(init.sub("s2"), w, w, stride=2)
        self.m1 = ResBlock(init.sub("m1"), w, w, e)
        self.spatial = AttnBlock(init.sub("spatial"), w, cfg.heads)
        self.temporal = AttnBlock(init.sub("temporal"), w, cfg.heads)
        self.cross = AttnBlock(init.sub("cross"), w, cfg.heads, ctx_norm=True)
        self.m2 = ResBlock(init.sub("m2"), w, w, e)
        self.u2 = ResBlock(init.sub("u2"), 2 * w, w, e)
        self.u1 = ResBlock(init.sub("u1"), w + b, b, e)
        self.out = Conv2d(init.sub("out"), b, 3, std=0.1 / math.sqrt(9 * b))

    def __call__(self, x, n, bundle: ConditionBundle) -> Tensor:
        """x [B,T,3,h,w], n int or [B] steps -> predicted clean state, same shape."""
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[2] != 3:
            raise DimensionError(f"denoiser input must be [B,T,3,h,w], got {x.shape}")
        B, T, _, h, w = x.shape
        cfg = self.cfg
        z = bundle.z
        if z.shape != (B, cfg.c_lat, h, w):
            raise DimensionError(f"latent {z.shape} does not match state {x.shape}")
        steps = np.broadcast_to(np.asarray(n), (B,))
        temb = self.t2(ops.silu(self.t1(Tensor(sinusoidal_embedding(steps, cfg.emb // 2)))))
        femb = self.frame(Tensor(sinusoidal_embedding(np.arange(T), cfg.emb // 2)))
        emb = ops.reshape(ops.reshape(temb, (B, 1, cfg.emb)) + ops.reshape(femb, (1, T, cfg.emb)),
                          (B * T, cfg.emb))
        zt = ops.broadcast_to(ops.reshape(z, (B, 1) + z.shape[1:]), (B, T) + z.shape[1:])
        hx = ops.concat([ops.reshape(x, (B * T, 3, h, w)), ops.reshape(zt, (B * T, cfg.c_lat, h, w))], axis=1)
        h0 = self.d1(self.inp(hx), emb)
        h1 = self.d2(self.s1(h0), emb)
        hm = self.m1(self.s2(h1), emb)
        hm = self._attention(hm, B, T, bundle)
        hm = self.m2(hm, emb)
        up = self.u2(ops.concat([ops.upsample2x(hm), h1], axis=1), emb)
        up = self.u1(ops.concat([ops.upsample2x(up), h0], axis=1), emb)
        out = self.out(ops.silu(up))
        return ops.reshape(out, (B, T, 3, h, w))

    def _attention(self, hm: Tensor, B: int, T: int, bundle: ConditionBundle) -> Tensor:
        _, c, hh, ww = hm.shape
        L = hh * ww
        tok = ops.transpose(ops.reshape(hm, (B * T, c, L)), (0, 2, 1))  # [BT, L, C]
        tok = self.spatial(tok)
        tt = ops.transpose(ops.reshape(tok, (B, T, L, c)), (0, 2, 1, 3))  # [B, L, T, C]
        codes = Tensor(sinusoidal_embedding(np.arange(T), c))
        tt = self.temporal(tt, pos=codes)
        tok = ops.reshape(ops.transpose(tt, (0, 2, 1, 3)), (B * T, L, c))
        ctx = bundle.context()
        ctx = ops.reshape(ctx, (B * T,) + ctx.shape[2:])
        tok = self.cross(tok, context=ctx)
        return ops.reshape(ops.transpose(tok, (0, 2, 1)), (B * T, c, hh, ww))


class Stage2Model(Module):
    """Conditioning modules plus the denoiser; everything trainable in stage 2."""

    def __init__(self, cond_cfg: CondConfig, dn_cfg: DenoiserConfig, seed: int = 0):
        self.cond = Conditioner(cond_cfg, seed)
        self.dm = Denoiser(dn_cfg, Init(seed, "dm"))


# -- losses -----------------------------------------------------------------------

def reduce_loss(pred: Tensor, x0, kind: str = "l2sq") -> Tensor:
    d = pred - as_tensor(x0)
    if kind == "l2sq":
        return ops.mean(ops.mul(d, d))
    if kind == "l1":
        return ops.mean(ops.abs(d))
    if kind == "l2":
        per = ops.mean(ops.reshape(ops.mul(d, d), (d.shape[0], -1)), axis=1)
        return ops.mean(ops.sqrt(per + 1e-12))
    raise ConfigError(f"unknown dm_loss {kind!r} (choose from {', '.join(DM_LOSSES)})")


def ddpm_loss(predict: Callable, x0: np.ndarray, cond, sched: NoiseSchedule, rng: Rng,
              kind: str = "l2sq", n=None, eps=None) -> Tensor:
    """Noise ``x0`` to a uniformly drawn step and score the clean estimate.

    ``n`` and ``eps`` may be supplied to fix the draw (held-out evaluation).
    """
    x0 = np.asarray(x0, dtype=default_dtype())
    B = x0.shape[0]
    if n is None:
        n = rng.integers(1, sched.N + 1, (B,))
    if eps is None:
        eps = rng.normal(x0.shape, dtype=x0.dtype)
    x_n = q_sample(x0, n, eps, sched)
    return reduce_loss(as_tensor(predict(x_n, n, cond)), x0, kind)


# -- training ---------------------------------------------------------------------

@dataclass
class Stage2Config:
    iterations: int = 400
    batch: int = 4
    lr: float = 1e-3
    N: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.1
    dm_loss: str = "l2sq"
    width: int = 64
    base: int = 32
    heads: int = 4
    patch: int = 8
    disable: tuple = ()
    fuse_mode: str = "ide"
    stop_ego_grad: bool = False
    log_every: int = 10
    ckpt_every: int = 0
    eval_clips: int = 16
    eval_draws: int = 4
    eval_seed: int = 0

    def cond_config(self, S: int, T: int, vocab_size: int) -> CondConfig:
        return CondConfig(S=S, T=T, patch=self.patch, width=self.width, heads=self.heads,
                          vocab_size=vocab_size, disable=tuple(self.disable), fuse_mode=self.fuse_mode,
                          stop_ego_grad=self.stop_ego_grad)

    def denoiser_config(self, c_lat: int) -> DenoiserConfig:
        return DenoiserConfig(c_lat=c_lat, base=self.base, width=self.width, heads=self.heads)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.N, self.beta_min, self.beta_max)


@dataclass
class ClipCondInputs:
    """Everything stage 2 needs from one clip, with frozen stage-1 outputs precomputed."""

    clip_id: str
    exo1: np.ndarray
    ego1: np.ndarray
    traj: np.ndarray
    tokens: list
    x0: np.ndarray  # [T, 3, h, w]
    z: np.ndarray  # [c_lat, h, w]
    ego_video: Optional[np.ndarray] = None


def stage2_targets(lfae, exo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Frozen flow/occlusion from frame 1 to every frame t, packed; and the frame-1 latent."""
    with no_grad():
        T = exo.shape[0]
        first = np.broadcast_to(exo[0], exo.shape).copy()
        f, m = lfae.estimate_flow(first, exo)
        z = lfae.encode(exo[0])
    x0 = pack_state(f.data, m.data).astype(default_dtype())
    assert x0.shape[0] == T
    return x0, z.data.copy()


def prepare_clips(dataset, ids, lfae, keep_video: bool = False) -> list[ClipCondInputs]:
    out = []
    for cid in ids:
        clip = dataset.load_clip(cid)
        x0, z = stage2_targets(lfae, clip.exo)
        out.append(ClipCondInputs(cid, clip.exo[0], clip.ego[0], clip.trajectory, list(clip.description), x0, z,
                                  clip.ego if keep_video else None))
    return out


def bundle_for(model: Stage2Model, items: list[ClipCondInputs]) -> ConditionBundle:
    video = None
    if model.cond.fuse_video is not None:
        video = np.stack([c.ego_video for c in items])
    return model.cond(
        np.stack([c.exo1 for c in items]), np.stack([c.ego1 for c in items]),
        np.stack([c.traj for c in items]), [c.tokens for c in items],
        Tensor(np.stack([c.z for c in items])), ego_video=video,
    )


def _predictor(model: Stage2Model):
    return lambda x_n, n, bundle: model.dm(x_n, n, bundle)


def heldout_dm_loss(model: Stage2Model, items: list[ClipCondInputs], sched: NoiseSchedule,
                    cfg: Stage2Config, chunk: int = 8) -> float:
    """L_dm on fixed (n, eps) draws that depend only on ``cfg.eval_seed`` and the clip id."""
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(items), chunk):
            part = items[s:s + chunk]
            bundle = bundle_for(model, part)
            x0 = np.stack([c.x0 for c in part])
            for d in range(cfg.eval_draws):
                rngs = [Rng(derive_seed(cfg.eval_seed, "stage2-eval", c.clip_id, d)) for c in part]
                n = np.array([r.integers(1, sched.N + 1) for r in rngs])
                eps = np.stack([r.normal(x0.shape[1:], dtype=x0.dtype) for r in rngs])
                loss = ddpm_loss(_predictor(model), x0, bundle, sched, None, cfg.dm_loss, n=n, eps=eps)
                total += loss.item() * len(part)
                count += len(part)
    return total / count


def _fill_missing_grads(params: list[Tensor]) -> None:
    # parameters the current batch did not reach (e.g. the empty-text token) take a zero step
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train_stage2(train_items: list[ClipCondInputs], heldout: list[ClipCondInputs], cfg: Stage2Config,
                 seed: int, S: int, c_lat: int, vocab_size: int, out_dir=None,
                 save: Optional[Callable] = None) -> tuple[Stage2Model, dict]:
    """Minimize L_align + L_dm over all stage-2 modules. Returns (model, summary).

    Loss rows (iter, l_align, l_dm, total) go to ``out_dir/train_log.csv``.
    """
    T = train_items[0].x0.shape[0]
    model = Stage2Model(cfg.cond_config(S, T, vocab_size), cfg.denoiser_config(c_lat), seed)
    sched = cfg.schedule()
    params = model.parameters()
    opt = OptimizerState(lr=cfg.lr)
    rng = Rng(derive_seed(seed, "stage2-batches"))
    predict = _predictor(model)
    init_heldout = heldout_dm_loss(model, heldout, sched, cfg) if heldout else float("nan")
    history = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "l_align", "l_dm", "total"])
    try:
        for it in range(1, cfg.iterations + 1):
            picks = rng.integers(0, len(train_items), (cfg.batch,))
            items = [train_items[k] for k in picks]
            bundle = bundle_for(model, items)
            x0 = np.stack([c.x0 for c in items])
            l_dm = ddpm_loss(predict, x0, bundle, sched, rng, cfg.dm_loss)
            if bundle.y_cls_exo is not None:
                l_align = align_loss(bundle.y_cls_exo, bundle.y_cls_ego, cfg.stop_ego_grad)
                total = l_align + l_dm
            else:
                l_align, total = None, l_dm
            total.backward()
            _fill_missing_grads(params)
            adam_step(params, opt)
            la = 0.0 if l_align is None else l_align.item()
            history.append((la, l_dm.item()))
            if writer is not None and (it % cfg.log_every == 0 or it == cfg.iterations):
                writer.writerow([it, f"{la:.6g}", f"{l_dm.item():.6g}", f"{la + l_dm.item():.6g}"])
            if save is not None and out_dir is not None and cfg.ckpt_every and it % cfg.ckpt_every == 0 \
                    and it < cfg.iterations:
                save(out_dir / f"stage2_{it:06d}.ckpt", model)
    finally:
        if fh is not None:
            fh.close()
    final_heldout = heldout_dm_loss(model, heldout, sched, cfg) if heldout else float("nan")
    dm_hist = np.array([h[1] for h in history])
    summary = {
        "first100_dm": float(dm_hist[:100].mean()),
        "last100_dm": float(dm_hist[-100:].mean()),
        "heldout_init": init_heldout,
        "heldout_final": final_heldout,
    }
    log.info("stage2 done: held-out L_dm %.5f -> %.5f (first-100 train avg %.5f)",
             init_heldout, final_heldout, summary["first100_dm"])
    if save is not None and out_dir is not None:
        save(out_dir / "stage2.ckpt", model)
    return model, summary


def sample_sequence(model: Stage2Model, bundle: ConditionBundle, sched: NoiseSchedule, seed,
                    dump: Optional[Callable] = None) -> tuple[np.ndarray, np.ndarray]:
    """Flow [B,T,2,h,w] and occlusion [B,T,1,h,w] in [0,1] sampled for ``bundle``."""
    B, T = bundle.r_exo.shape[:2]
    _, c, h, w = bundle.z.shape
    predict = _predictor(model)

    def pred(x, n, b):
        with no_grad():
            return predict(x, n, b).data

    x = sample_loop(pred, (B, T, 3, h, w), bundle, sched, seed, dump)
    return unpack_state(x)
