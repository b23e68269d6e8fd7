"""Cross-view feature perception.

Both first frames are tokenized by a frozen patch projection. Each view's
class token then attends over the other view's patch tokens, and a pre-norm
transformer layer mixes the updated class token back into its own patches.
A KL term pulls the two class tokens together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import Init, LayerNorm, Linear, Module
from .autodiff.tensor import Tensor, as_tensor
from .errors import DimensionError, NumericError


@dataclass
class TokenGrid:
    """Class token plus patch tokens, stored together as ``tokens[..., 1+L, C]``."""

    tokens: Tensor

    @property
    def cls(self) -> Tensor:
        return self.tokens[..., 0, :]

    @property
    def patch(self) -> Tensor:
        return self.tokens[..., 1:, :]

    @property
    def shape(self) -> tuple:
        return self.tokens.shape

    @classmethod
    def from_parts(cls, cls_tok: Tensor, patch: Tensor) -> "TokenGrid":
        c = ops.reshape(cls_tok, cls_tok.shape[:-1] + (1, cls_tok.shape[-1]))
        return cls(ops.concat([c, patch], axis=-2))


# -- attention --------------------------------------------------------------

class AttentionParams(Module):
    """Query/key/value projections of width C split over ``heads``."""

    def __init__(self, init: Init, width: int, heads: int):
        if width % heads:
            raise DimensionError(f"width {width} is not divisible by {heads} heads")
        std = 1.0 / math.sqrt(width)
        self.wq = init.normal("wq", (width, width), std)
        self.wk = init.normal("wk", (width, width), std)
        self.wv = init.normal("wv", (width, width), std)
        self.heads = heads

    @property
    def width(self) -> int:
        return self.wq.shape[0]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = ops.reshape(x, tuple(lead) + (n, heads, c // heads))
    r = len(lead)
    return ops.transpose(x, tuple(range(r)) + (r + 1, r, r + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    r = len(lead)
    x = ops.transpose(x, tuple(range(r)) + (r + 1, r, r + 2))
    return ops.reshape(x, tuple(lead) + (n, h * dh))


def attention_weights(q_in: Tensor, k_in: Tensor, p: AttentionParams) -> Tensor:
    """Per-head attention matrix ``softmax(q k^T / sqrt(C/h))``, shape [..., h, n1, n2]."""
    q = _split_heads(ops.matmul(q_in, p.wq), p.heads)
    k = _split_heads(ops.matmul(k_in, p.wk), p.heads)
    scale = 1.0 / math.sqrt(p.width / p.heads)
    logits = ops.mul(ops.matmul(q, ops.transpose(k, _swap_last(k.ndim))), scale)
    return ops.softmax(logits, axis=-1)


def _swap_last(ndim: int) -> tuple:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def attend(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head ``A v`` without the residual. Keys and values may differ in content."""
    a = attention_weights(q_in, k_in, p)
    v = _split_heads(ops.matmul(v_in, p.wv), p.heads)
    return _merge_heads(ops.matmul(a, v))


def _check_width(p: AttentionParams, *xs) -> None:
    for x in xs:
        if x is not None and x.shape[-1] != p.width:
            raise DimensionError(f"token width {x.shape[-1]} does not match attention width {p.width}")


def cross_attention(e1, e2, p: AttentionParams, q_pos=None, k_pos=None) -> Tensor:
    """``Y = A v + e1`` with ``d = [e1, e2]``, ``q = e1 Wq``, ``k = d Wk``, ``v = d Wv``.

    ``e1`` is [..., n1, C] and ``e2`` is [..., n2, C] (``n2`` may be 0 or
    ``e2`` None). Optional ``q_pos``/``k_pos`` are added to the query side
    and to the key inputs (for the e1 and e2 rows respectively), never to
    the values, so the residual path stays ``e1``.
    """
    e1 = as_tensor(e1)
    e2 = None if e2 is None else as_tensor(e2)
    _check_width(p, e1, e2)
    if e2 is not None and e2.shape[:-2] != e1.shape[:-2]:
        raise DimensionError(f"cross_attention batch axes differ: {e1.shape} vs {e2.shape}")
    q_in = e1 if q_pos is None else e1 + q_pos
    if e2 is None or e2.shape[-2] == 0:
        d_v, d_k = e1, q_in
    else:
        d_v = ops.concat([e1, e2], axis=-2)
        d_k = ops.concat([q_in, e2 if k_pos is None else e2 + k_pos], axis=-2)
    return attend(q_in, d_k, d_v, p) + e1


class CrossAttention(Module):
    def __init__(self, init: Init, width: int, heads: int):
        self.attn = AttentionParams(init, width, heads)

    def __call__(self, e1, e2, q_pos=None, k_pos=None) -> Tensor:
        return cross_attention(e1, e2, self.attn, q_pos, k_pos)


class TransformerLayer(Module):
    """Pre-norm self-attention and a two-layer MLP, both residual."""

    def __init__(self, init: Init, width: int, heads: int, mlp_mult: int = 2):
        self.ln1 = LayerNorm(init.sub("ln1"), width)
        self.attn = AttentionParams(init.sub("attn"), width, heads)
        self.ln2 = LayerNorm(init.sub("ln2"), width)
        self.fc1 = Linear(init.sub("fc1"), width, mlp_mult * width)
        self.fc2 = Linear(init.sub("fc2"), mlp_mult * width, width, std=0.5 / math.sqrt(mlp_mult * width))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + attend(h, h, h, self.attn)
        return x + self.fc2(ops.silu(self.fc1(self.ln2(x))))


# -- patch tokens -------------------------------------------------------------

def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """[B,3,S,S] -> [B, L, 3*P*P] non-overlapping patches in row-major grid order."""
    b, c, h, w = frames.shape
    if h % patch or w % patch:
        raise DimensionError(f"frame size {h}x{w} is not divisible by patch size {patch}")
    x = frames.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PatchEmbed(Module):
    """Frozen random patch projection with learned position embeddings and class token."""

    def __init__(self, init: Init, S: int, patch: int, width: int):
        if S % patch:
            raise DimensionError(f"frame size {S} is not divisible by patch size {patch}")
        self.patch = patch
        self.n_patches = (S // patch) ** 2
        din = 3 * patch * patch
        self.proj = init.normal("proj", (din, width), 1.0 / math.sqrt(din), trainable=False)
        self.pos = init.normal("pos", (self.n_patches, width), 0.02)
        self.cls = init.normal("cls", (width,), 0.02)

    def __call__(self, frames) -> TokenGrid:
        x = np.asarray(as_tensor(frames).data)
        if x.ndim == 3:
            x = x[None]
        # centre pixel values so the frozen projection sees zero-mean input
        patches = Tensor(patchify(x, self.patch) - 0.5, dtype=self.proj.dtype)
        tok = ops.matmul(patches, self.proj) + self.pos
        b = tok.shape[0]
        cls = ops.broadcast_to(self.cls, (b, self.cls.shape[0]))
        return TokenGrid.from_parts(cls, tok)


@dataclass
class CfpmConfig:
    S: int = 64
    patch: int = 8
    width: int = 64
    heads: int = 4
    tied: bool = False  # share the per-view weights (used by symmetry checks)
    enabled: bool = True
    stop_ego_grad: bool = False


class CFPM(Module):
    """Cross-view class-token attention followed by one transformer layer per view."""

    def __init__(self, cfg: CfpmConfig, init: Init):
        self.cfg = cfg
        self.ca_exo = CrossAttention(init.sub("ca_exo"), cfg.width, cfg.heads)
        self.tf_exo = TransformerLayer(init.sub("tf_exo"), cfg.width, cfg.heads)
        if cfg.tied:
            self.ca_ego, self.tf_ego = self.ca_exo, self.tf_exo
        else:
            self.ca_ego = CrossAttention(init.sub("ca_ego"), cfg.width, cfg.heads)
            self.tf_ego = TransformerLayer(init.sub("tf_ego"), cfg.width, cfg.heads)

    def tensors(self):
        seen = set()
        for t in super().tensors():
            if id(t) not in seen:
                seen.add(id(t))
                yield t

    def __call__(self, e_exo: TokenGrid, e_ego: TokenGrid) -> tuple[TokenGrid, TokenGrid]:
        if e_exo.shape != e_ego.shape:
            raise DimensionError(f"view token grids differ: {e_exo.shape} vs {e_ego.shape}")
        cls_exo = self._cls_query(self.ca_exo, e_exo, e_ego)
        cls_ego = self._cls_query(self.ca_ego, e_ego, e_exo)
        y_exo = TokenGrid(self.tf_exo(TokenGrid.from_parts(cls_exo, e_exo.patch).tokens))
        y_ego = TokenGrid(self.tf_ego(TokenGrid.from_parts(cls_ego, e_ego.patch).tokens))
        return y_exo, y_ego

    @staticmethod
    def _cls_query(ca: CrossAttention, own: TokenGrid, other: TokenGrid) -> Tensor:
        q = ops.reshape(own.cls, own.cls.shape[:-1] + (1, own.cls.shape[-1]))
        y = ca(q, other.patch)
        return ops.reshape(y, own.cls.shape)


def cfpm_forward(embed: PatchEmbed, cfpm: Optional[CFPM], frame_exo, frame_ego) -> tuple[TokenGrid, TokenGrid]:
    """Tokenize both first frames and fuse them; ``cfpm=None`` returns raw embeddings."""
    e_exo, e_ego = embed(frame_exo), embed(frame_ego)
    if cfpm is None:
        return e_exo, e_ego
    return cfpm(e_exo, e_ego)


def align_loss(y_cls_exo, y_cls_ego, stop_ego_grad: bool = False) -> Tensor:
    """Mean over the batch of ``KL(softmax(y_exo) || softmax(y_ego))`` along channels."""
    a, b = as_tensor(y_cls_exo), as_tensor(y_cls_ego)
    if a.shape != b.shape:
        raise DimensionError(f"align_loss shapes differ: {a.shape} vs {b.shape}")
    if not (np.isfinite(a.data).all() and np.isfinite(b.data).all()):
        raise NumericError("align_loss received non-finite class tokens")
    if stop_ego_grad:
        b = b.detach()
    lp = ops.log_softmax(a, axis=-1)
    lq = ops.log_softmax(b, axis=-1)
    kl = ops.sum(ops.mul(ops.exp(lp), lp - lq), axis=-1)
    # rounding can leave a tiny negative value for nearly equal inputs
    return ops.mean(ops.relu(kl))
