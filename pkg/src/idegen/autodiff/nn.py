"""Parameter containers and the layers the models are assembled from.

Every parameter is initialised from its own RNG stream derived from
``(seed, full_name)``; two models built with the same seed share the
initial values of every parameter they have in common, regardless of which
optional submodules are present.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .rng import Rng, derive_seed
from .tensor import Tensor, default_dtype


class Init:
    """Naming scope plus seed for parameter construction."""

    def __init__(self, seed: int, prefix: str = ""):
        self.seed = seed
        self.prefix = prefix

    def sub(self, name: str) -> "Init":
        return Init(self.seed, f"{self.prefix}.{name}" if self.prefix else name)

    def full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def rng(self, name: str) -> Rng:
        return Rng(derive_seed(self.seed, self.full(name)))

    def normal(self, name: str, shape, std: float, trainable: bool = True) -> Tensor:
        data = self.rng(name).normal(tuple(shape)) * std
        return Tensor(data.astype(default_dtype()), requires_grad=trainable, name=self.full(name))

    def const(self, name: str, shape, value: float = 0.0, trainable: bool = True) -> Tensor:
        data = np.full(tuple(shape), value, dtype=default_dtype())
        return Tensor(data, requires_grad=trainable, name=self.full(name))


class Module:
    """Walks attributes to find parameters and submodules."""

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Tensor, Module)):
                yield val
            elif isinstance(val, (list, tuple)):
                for v in val:
                    if isinstance(v, (Tensor, Module)):
                        yield v

    def tensors(self) -> Iterator[Tensor]:
        """All named tensors (trainable or frozen), depth first."""
        for child in self._children():
            if isinstance(child, Tensor):
                if child.name is not None:
                    yield child
            else:
                yield from child.tensors()

    def parameters(self) -> list[Tensor]:
        return [t for t in self.tensors() if t.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {t.name: t.data for t in self.tensors()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = {t.name: t for t in self.tensors()}
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, t in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != t.shape:
                    raise ValueError(f"tensor {name}: shape {arr.shape} != expected {t.shape}")
                t.data = arr.astype(t.dtype)

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


class Linear(Module):
    def __init__(self, init: Init, cin: int, cout: int, bias: bool = True, std: Optional[float] = None):
        self.w = init.normal("w", (cin, cout), std if std is not None else 1.0 / math.sqrt(cin))
        self.b = init.const("b", (cout,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        return y if self.b is None else y + self.b


class Conv2d(Module):
    def __init__(self, init: Init, cin: int, cout: int, k: int = 3, stride: int = 1,
                 bias: bool = True, std: Optional[float] = None, trainable: bool = True):
        fan_in = cin * k * k
        self.w = init.normal("w", (cout, cin, k, k), std if std is not None else 1.0 / math.sqrt(fan_in),
                             trainable=trainable)
        self.b = init.const("b", (cout,), trainable=trainable) if bias else None
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, init: Init, width: int):
        self.g = init.const("g", (width,), 1.0)
        self.b = init.const("b", (width,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.g, self.b)


class ResBlock(Module):
    """Two 3x3 convs with SiLU and an identity (or 1x1) skip.

    ``emb`` is an optional per-sample channel bias (time embedding) added
    after the first conv.
    """

    def __init__(self, init: Init, cin: int, cout: int, emb_dim: int = 0):
        self.c1 = Conv2d(init.sub("c1"), cin, cout)
        self.c2 = Conv2d(init.sub("c2"), cout, cout, std=0.5 / math.sqrt(cout * 9))
        self.skip = Conv2d(init.sub("skip"), cin, cout, k=1) if cin != cout else None
        self.emb = Linear(init.sub("emb"), emb_dim, cout) if emb_dim else None

    def __call__(self, x: Tensor, emb: Optional[Tensor] = None) -> Tensor:
        h = self.c1(ops.silu(x))
        if self.emb is not None and emb is not None:
            e = self.emb(emb)
            h = h + ops.reshape(e, e.shape + (1, 1))
        h = self.c2(ops.silu(h))
        return (x if self.skip is None else self.skip(x)) + h


def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features of integer or real positions, shape [len, dim]."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(positions), 1))], axis=1)
    return emb.astype(default_dtype())
