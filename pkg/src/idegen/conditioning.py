"""Condition bundle for the denoiser: trajectory-driven exo tokens, text, first-frame latent.

The trajectory module lets replicated ego tokens attend over per-frame
trajectory features (one fused copy per output frame), then uses each
fused copy to update the exo class token. The text unit mean-pools a small
learned token table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import Init, Linear, Module, sinusoidal_embedding
from .autodiff.tensor import Tensor, as_tensor, default_dtype
from .cfpm import CFPM, CfpmConfig, CrossAttention, PatchEmbed, TokenGrid, TransformerLayer
from .errors import ConfigError, DimensionError, NumericError, VocabularyError

FUSE_MODES = ("ide", "traj_condition", "traj_concat", "ego_video_feats")
ABLATIONS = ("cfpm", "adu", "ttm")
TRAJ_FEATURES = 7


@dataclass
class CondConfig:
    S: int = 64
    T: int = 8
    patch: int = 8
    width: int = 64
    heads: int = 4
    vocab_size: int = 20
    text_dim: int = 32
    disable: tuple = ()
    fuse_mode: str = "ide"
    stop_ego_grad: bool = False
    tied_views: bool = False

    def __post_init__(self):
        self.disable = tuple(sorted(set(self.disable)))
        bad = [d for d in self.disable if d not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown module to disable: {bad[0]!r} (choose from {', '.join(ABLATIONS)})")
        if self.fuse_mode not in FUSE_MODES:
            raise ConfigError(f"unknown fuse_mode {self.fuse_mode!r} (choose from {', '.join(FUSE_MODES)})")

    def uses(self, part: str) -> bool:
        return part not in self.disable


# -- trajectory -------------------------------------------------------------

def trajectory_features(traj: np.ndarray, S: int) -> np.ndarray:
    """Per-frame (x/S, y/S, sin, cos, dx/S, dy/S, dtheta); deltas are zero at frame 0.

    Accepts [T,3] or [B,T,3]; returns [..., T, 7].
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape[-1] != 3 or traj.ndim not in (2, 3):
        raise DimensionError(f"trajectory must be [T,3] or [B,T,3], got {traj.shape}")
    if not np.isfinite(traj).all():
        raise NumericError("trajectory contains non-finite poses")
    x, y, th = traj[..., 0], traj[..., 1], traj[..., 2]
    d = np.zeros_like(traj)
    d[..., 1:, :] = traj[..., 1:, :] - traj[..., :-1, :]
    dth = (d[..., 2] + math.pi) % (2 * math.pi) - math.pi
    dth[..., 0] = 0.0
    feats = np.stack([x / S, y / S, np.sin(th), np.cos(th), d[..., 0] / S, d[..., 1] / S, dth], axis=-1)
    return feats.astype(default_dtype())


class TrajectoryEncoder(Module):
    def __init__(self, init: Init, width: int):
        self.fc1 = Linear(init.sub("fc1"), TRAJ_FEATURES, width)
        self.fc2 = Linear(init.sub("fc2"), width, width)

    def __call__(self, traj, S: int) -> Tensor:
        return self.fc2(ops.silu(self.fc1(Tensor(trajectory_features(traj, S)))))


def encode_trajectory(enc: TrajectoryEncoder, traj, S: int) -> Tensor:
    """Trajectory [.., T, 3] -> features [.., T, C]."""
    return enc(traj, S)


def _frame_codes(T: int, width: int) -> Tensor:
    return Tensor(sinusoidal_embedding(np.arange(T), width))


def temporal_fuse(y_ego: TokenGrid, traj_feats: Tensor, ca: CrossAttention) -> Tensor:
    """Ego tokens replicated once per frame, each copy attending over the trajectory.

    Copy ``t`` carries frame code ``t`` on its queries and keys, trajectory
    row ``s`` carries code ``s`` on its keys; values are untouched, so the
    residual of every copy is the ego token grid itself. Returns
    [B, T, 1+L, C].
    """
    tok = y_ego.tokens
    traj_feats = as_tensor(traj_feats)
    if tok.ndim == 2:
        tok = ops.reshape(tok, (1,) + tok.shape)
    if traj_feats.ndim == 2:
        traj_feats = ops.reshape(traj_feats, (1,) + traj_feats.shape)
    b, n, c = tok.shape
    if traj_feats.shape[0] != b or traj_feats.shape[-1] != c:
        raise DimensionError(f"temporal_fuse: ego tokens {tok.shape} vs trajectory features {traj_feats.shape}")
    T = traj_feats.shape[1]
    codes = _frame_codes(T, c)
    e1 = ops.broadcast_to(ops.reshape(tok, (b, 1, n, c)), (b, T, n, c))
    e2 = ops.broadcast_to(ops.reshape(traj_feats, (b, 1, T, c)), (b, T, T, c))
    return ca(e1, e2, q_pos=ops.reshape(codes, (1, T, 1, c)), k_pos=ops.reshape(codes, (1, 1, T, c)))


def exo_update(y_exo: TokenGrid, r_ego: Tensor, ca: CrossAttention, layer: TransformerLayer) -> Tensor:
    """Per frame: the exo class token queries that frame's ego patches, then one transformer layer.

    ``r_ego`` is [B, T, 1+L, C]; returns [B, T, 1+L, C]. Frames never mix.
    """
    tok = y_exo.tokens
    if tok.ndim == 2:
        tok = ops.reshape(tok, (1,) + tok.shape)
    r_ego = as_tensor(r_ego)
    b, n, c = tok.shape
    if r_ego.ndim != 4 or r_ego.shape[0] != b or r_ego.shape[2:] != (n, c):
        raise DimensionError(f"exo_update: exo tokens {tok.shape} vs fused ego tokens {r_ego.shape}")
    T = r_ego.shape[1]
    q = ops.broadcast_to(ops.reshape(tok[:, 0:1], (b, 1, 1, c)), (b, T, 1, c))
    r_cls = ca(q, r_ego[:, :, 1:])
    patch = ops.broadcast_to(ops.reshape(tok[:, 1:], (b, 1, n - 1, c)), (b, T, n - 1, c))
    return layer(ops.concat([r_cls, patch], axis=2))


class TTM(Module):
    def __init__(self, init: Init, width: int, heads: int):
        self.traj = TrajectoryEncoder(init.sub("traj"), width)
        self.fuse = CrossAttention(init.sub("fuse"), width, heads)
        self.query = CrossAttention(init.sub("query"), width, heads)
        self.layer = TransformerLayer(init.sub("layer"), width, heads)

    def __call__(self, y_exo: TokenGrid, y_ego: TokenGrid, traj, S: int) -> Tensor:
        feats = self.traj(traj, S)
        r_ego = temporal_fuse(y_ego, feats, self.fuse)
        return exo_update(y_exo, r_ego, self.query, self.layer)


# -- text -----------------------------------------------------------------------

class TextEncoder(Module):
    """Mean-pooled token table followed by a linear map; a learned null token for empty input."""

    def __init__(self, init: Init, vocab_size: int, dim: int, width: int):
        self.table = init.normal("table", (vocab_size, dim), 1.0)
        self.proj = Linear(init.sub("proj"), dim, width)
        self.null = init.normal("null", (width,), 0.02)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def __call__(self, batch: Sequence[Sequence[int]]) -> Tensor:
        V = self.vocab_size
        weights = np.zeros((len(batch), V), dtype=default_dtype())
        empty = np.zeros((len(batch), 1), dtype=default_dtype())
        for r, ids in enumerate(batch):
            ids = list(ids)
            for i in ids:
                if not isinstance(i, (int, np.integer)) or not 0 <= i < V:
                    raise VocabularyError(f"token id {i!r} is outside the vocabulary (size {V})")
            if not ids:
                empty[r] = 1
                continue
            for i in ids:
                weights[r, i] += 1.0 / len(ids)
        pooled = self.proj(ops.matmul(Tensor(weights), self.table))
        return pooled * Tensor(1 - empty) + ops.mul(Tensor(empty), self.null)


def encode_text(enc: TextEncoder, tokens: Sequence[int]) -> Tensor:
    """One description -> [C]."""
    out = enc([tokens])
    return ops.reshape(out, out.shape[1:])


# -- bundle -----------------------------------------------------------------------

@dataclass
class ConditionBundle:
    r_exo: Tensor  # [B, T, 1+L, C]
    z: Tensor  # [B, c_lat, h, w], frozen encoder output
    t_text: Optional[Tensor] = None  # [B, C]
    extra: Optional[Tensor] = None  # [B, T, k, C] fuse-mode tokens
    y_cls_exo: Optional[Tensor] = None
    y_cls_ego: Optional[Tensor] = None

    @property
    def T(self) -> int:
        return self.r_exo.shape[1]

    def context(self) -> Tensor:
        """Per-frame cross-attention context [B, T, n_ctx, C]."""
        b, T, _, c = self.r_exo.shape
        parts = [self.r_exo]
        if self.t_text is not None:
            parts.append(ops.broadcast_to(ops.reshape(self.t_text, (b, 1, 1, c)), (b, T, 1, c)))
        if self.extra is not None:
            parts.append(self.extra)
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=2)


class Conditioner(Module):
    """All trainable conditioning modules for one configuration.

    Disabled modules are not constructed, so their tensors are absent from
    checkpoints.
    """

    def __init__(self, cfg: CondConfig, seed: int = 0):
        self.cfg = cfg
        root = Init(seed, "")
        self.vis = PatchEmbed(root.sub("vis"), cfg.S, cfg.patch, cfg.width)
        self.cfpm = None
        if cfg.uses("cfpm"):
            ccfg = CfpmConfig(cfg.S, cfg.patch, cfg.width, cfg.heads, tied=cfg.tied_views,
                              stop_ego_grad=cfg.stop_ego_grad)
            self.cfpm = CFPM(ccfg, root.sub("cfpm"))
        ide = cfg.fuse_mode == "ide"
        self.ttm = TTM(root.sub("ttm"), cfg.width, cfg.heads) if (ide and cfg.uses("ttm")) else None
        self.adu = TextEncoder(root.sub("adu"), cfg.vocab_size, cfg.text_dim, cfg.width) if cfg.uses("adu") else None
        self.fuse_traj = None
        self.fuse_video = None
        if cfg.fuse_mode in ("traj_condition", "traj_concat"):
            self.fuse_traj = TrajectoryEncoder(root.sub("fuse").sub("traj"), cfg.width)
        elif cfg.fuse_mode == "ego_video_feats":
            from .metrics import VideoFeatureNet
            self._video_net = VideoFeatureNet()
            self.fuse_video = Linear(root.sub("fuse").sub("video"), self._video_net.dim, cfg.width)

    def tokens(self, exo1, ego1) -> tuple[TokenGrid, TokenGrid]:
        e_exo, e_ego = self.vis(exo1), self.vis(ego1)
        if self.cfpm is None:
            return e_exo, e_ego
        return self.cfpm(e_exo, e_ego)

    def __call__(self, exo1, ego1, traj, tokens: Sequence[Sequence[int]], z, ego_video=None) -> ConditionBundle:
        """Batched inputs: exo1/ego1 [B,3,S,S], traj [B,T,3], one token list per sample."""
        cfg = self.cfg
        traj = np.asarray(traj)
        if traj.ndim == 2:
            traj = traj[None]
        T = traj.shape[1]
        y_exo, y_ego = self.tokens(exo1, ego1)
        b, n, c = y_exo.shape
        if self.ttm is not None:
            r_exo = self.ttm(y_exo, y_ego, traj, cfg.S)
        else:
            r_exo = ops.broadcast_to(ops.reshape(y_exo.tokens, (b, 1, n, c)), (b, T, n, c))
        extra = None
        if self.fuse_traj is not None:
            feats = self.fuse_traj(traj, cfg.S)  # [B, T, C]
            extra = ops.reshape(feats, (b, T, 1, c))
            if cfg.fuse_mode == "traj_concat":
                ego_cls = ops.broadcast_to(ops.reshape(y_ego.cls, (b, 1, 1, c)), (b, T, 1, c))
                extra = ops.concat([extra, ego_cls], axis=2)
        elif self.fuse_video is not None:
            if ego_video is None:
                raise DimensionError("fuse_mode ego_video_feats needs the ego video frames")
            ego_video = np.asarray(ego_video)
            if ego_video.ndim == 4:
                ego_video = ego_video[None]
            feats = np.stack([self._video_net.frame_features(v) for v in ego_video])
            extra = ops.reshape(self.fuse_video(Tensor(feats.astype(default_dtype()))), (b, T, 1, c))
        t_text = self.adu(tokens) if self.adu is not None else None
        use_align = self.cfpm is not None
        return ConditionBundle(
            r_exo=r_exo, z=as_tensor(z), t_text=t_text, extra=extra,
            y_cls_exo=y_exo.cls if use_align else None, y_cls_ego=y_ego.cls if use_align else None,
        )


def build_condition(cond: Conditioner, encoder, exo1, ego1, traj, tokens, ego_video=None) -> ConditionBundle:
    """Assemble the bundle; ``encoder`` is the frozen Stage-1 image encoder (callable)."""
    from .autodiff.tensor import no_grad
    with no_grad():
        z = encoder(exo1)
    z = Tensor(z.data)
    if z.ndim == 3:
        z = ops.reshape(z, (1,) + z.shape)
    return cond(exo1, ego1, traj, tokens, z, ego_video=ego_video)
