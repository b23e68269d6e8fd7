"""Central finite-difference checks for every registered op.

Each case builds float64 inputs, contracts the op output against a fixed
random cotangent, and compares the tape gradient with central differences.
The error of one entry is ``|analytic - numeric|`` divided by the larger of
the two magnitudes, floored at 1% of the largest numeric entry so that
entries which are zero up to rounding do not dominate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .rng import Rng
from .tensor import REGISTRY, Tensor, precision

DEFAULT_TOL = 1e-4
FLOW_TOL = 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(1e-2 * np.abs(n).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4,
                 indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f`` wrt entries of ``x`` (mutated in place and restored)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else indices
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def check_function(fn: Callable[..., Tensor], inputs: list, seed: int = 0, h: float = 1e-4,
                   max_entries: int = 0) -> list[float]:
    """Return the relative error for each input of ``fn`` (float64 mode).

    ``max_entries`` > 0 checks a random subset of that many entries per input.
    """
    rng = Rng(seed)
    with precision(np.float64):
        tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        out = fn(*tensors)
        cot = rng.normal(out.shape)
        loss = ops.sum(ops.mul(out, Tensor(cot)))
        loss.backward()
        errors = []
        for t in tensors:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            data = t.data

            def f():
                with_grad = [Tensor(x.data) for x in tensors]
                return float((fn(*with_grad).data * cot).sum())

            idx = None
            if max_entries and data.size > max_entries:
                idx = np.sort(rng.permutation(data.size)[:max_entries])
            num = numeric_grad(f, data, h=h, indices=idx)
            ana = analytic.reshape(-1) if idx is None else analytic.reshape(-1)[idx]
            errors.append(rel_error(ana, num))
        return errors


def check_params(loss_fn: Callable[[], Tensor], params: list[Tensor], seed: int = 0, h: float = 1e-4,
                 max_entries: int = 8) -> dict[str, float]:
    """Finite-difference check of a scalar loss against model parameters in place.

    The model must already be float64. Returns per-parameter errors.
    """
    rng = Rng(seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        idx = None
        if max_entries and p.size > max_entries:
            idx = np.sort(rng.permutation(p.size)[:max_entries])
        num = numeric_grad(lambda: float(loss_fn().data), p.data, h=h, indices=idx)
        ana = analytic.reshape(-1) if idx is None else analytic.reshape(-1)[idx]
        errors[p.name] = rel_error(ana, num)
        p.grad = None
    return errors


@dataclass
class Case:
    fn: Callable[..., Tensor]
    shapes: list
    tol: list  # one tolerance per input
    positive: tuple = ()  # input indices that must be strictly positive


def _cases() -> dict[str, Case]:
    T = DEFAULT_TOL
    idx = np.array([2, 0, 2])
    return {
        "add": Case(lambda a, b: ops.add(a, b), [(3, 4), (4,)], [T, T]),
        "sub": Case(lambda a, b: ops.sub(a, b), [(3, 4), (3, 1)], [T, T]),
        "mul": Case(lambda a, b: ops.mul(a, b), [(2, 3, 4), (3, 4)], [T, T]),
        "div": Case(lambda a, b: ops.div(a, b), [(3, 4), (3, 4)], [T, T], positive=(1,)),
        "neg": Case(lambda a: ops.neg(a), [(5,)], [T]),
        "power": Case(lambda a: ops.power(a, 3.0), [(5,)], [T]),
        "exp": Case(lambda a: ops.exp(a), [(5,)], [T]),
        "log": Case(lambda a: ops.log(a), [(5,)], [T], positive=(0,)),
        "sqrt": Case(lambda a: ops.sqrt(a), [(5,)], [T], positive=(0,)),
        "abs": Case(lambda a: ops.abs(a), [(6,)], [T]),
        "tanh": Case(lambda a: ops.tanh(a), [(6,)], [T]),
        "sigmoid": Case(lambda a: ops.sigmoid(a), [(6,)], [T]),
        "silu": Case(lambda a: ops.silu(a), [(6,)], [T]),
        "relu": Case(lambda a: ops.relu(a), [(6,)], [T]),
        "clamp": Case(lambda a: ops.clamp(a, -0.5, 0.5), [(8,)], [T]),
        "sum": Case(lambda a: ops.sum(a, axis=1), [(3, 4, 2)], [T]),
        "mean": Case(lambda a: ops.mean(a, axis=(0, 2), keepdims=True), [(3, 4, 2)], [T]),
        "reshape": Case(lambda a: ops.reshape(a, (4, 6)), [(2, 3, 4)], [T]),
        "transpose": Case(lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)], [T]),
        "getitem": Case(lambda a: ops.getitem(a, (idx, slice(1, 3))), [(4, 4)], [T]),
        "concat": Case(lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 2)], [T, T]),
        "broadcast_to": Case(lambda a: ops.broadcast_to(a, (3, 2, 4)), [(2, 1)], [T]),
        "matmul": Case(lambda a, b: ops.matmul(a, b), [(2, 3, 4), (4, 5)], [T, T]),
        "softmax": Case(lambda a: ops.softmax(a, axis=-1), [(3, 5)], [T]),
        "log_softmax": Case(lambda a: ops.log_softmax(a, axis=0), [(4, 3)], [T]),
        "layer_norm": Case(lambda a, g, b: ops.layer_norm(a, g, b), [(3, 6), (6,), (6,)], [T, T, T]),
        "conv2d": Case(lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)],
                       [T, T, T]),
        "upsample2x": Case(lambda a: ops.upsample2x(a), [(2, 3, 3)], [T]),
        "avg_pool": Case(lambda a: ops.avg_pool(a, 2), [(2, 4, 4)], [T]),
        "grid_sample_bilinear": Case(lambda s, f: ops.grid_sample_bilinear(s, f), [(2, 5, 6), (2, 5, 6)],
                                     [T, FLOW_TOL]),
    }


CASES = _cases()


def _inputs_for(name: str, case: Case, seed: int) -> list:
    rng = Rng(seed).child(name)
    arrays = []
    for i, shape in enumerate(case.shapes):
        x = rng.normal(shape)
        if i in case.positive:
            x = np.abs(x) + 0.5
        if name == "grid_sample_bilinear" and i == 1:
            # keep sample points off the integer lattice and inside the map
            x = 0.15 * x + 0.031
        if name in ("abs", "relu", "clamp"):
            # stay away from kinks
            x = np.where(np.abs(x) < 0.05, x + 0.2, x)
            if name == "clamp":
                x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.13, x)
        arrays.append(x)
    return arrays


def run_op_checks(names=None, seed: int = 0) -> dict[str, tuple[float, float, bool]]:
    """Check every registered op; returns name -> (max error, tolerance, passed).

    Registered ops without a case are reported as failures.
    """
    report = {}
    for name in sorted(names or REGISTRY):
        case = CASES.get(name)
        if case is None:
            report[name] = (float("inf"), DEFAULT_TOL, False)
            continue
        errs = check_function(case.fn, _inputs_for(name, case, seed), seed=seed)
        passed = all(e < t for e, t in zip(errs, case.tol))
        report[name] = (max(errs), max(case.tol), passed)
    return report


MODEL_TOL = DEFAULT_TOL


def _model_suites(seed: int) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list]]]:
    """Tiny float64 models; each builder returns (loss_fn, params)."""
    from ..cfpm import CFPM, CfpmConfig, PatchEmbed, align_loss, cfpm_forward
    from ..conditioning import CondConfig, Conditioner
    from ..diffusion import AttnBlock
    from ..lfae import LatentFlowAE, PerceptualNet, Stage1Config, stage1_loss
    from .nn import Init

    rng = Rng(seed).child("model-suites")

    def lfae():
        cfg = Stage1Config(S=8, c_lat=2, width=2, lam=0.1)
        model, per = LatentFlowAE(cfg, seed), PerceptualNet(widths=(2, 2, 2))
        # the zero-init flow head samples exactly on pixel centres, where bilinear
        # sampling has a kink; check at a generic point instead
        w = model.flow.proj.w.data
        w[...] = rng.normal(w.shape) * 0.1
        a, b = rng.uniform(0.0, 1.0, (2, 3, 8, 8)), rng.uniform(0.0, 1.0, (2, 3, 8, 8))
        return (lambda: stage1_loss(model, per, a, b)), model.parameters()

    def cfpm():
        init = Init(seed, "g")
        cfg = CfpmConfig(S=8, patch=4, width=8, heads=2)
        embed, mod = PatchEmbed(init.sub("vis"), 8, 4, 8), CFPM(cfg, init.sub("cfpm"))
        a, b = rng.uniform(0.0, 1.0, (2, 3, 8, 8)), rng.uniform(0.0, 1.0, (2, 3, 8, 8))

        def loss():
            y_exo, y_ego = cfpm_forward(embed, mod, a, b)
            t = y_exo.tokens
            w = Tensor(np.linspace(-1, 1, t.size).reshape(t.shape))
            return ops.sum(ops.mul(t, w)) + align_loss(y_exo.cls, y_ego.cls)
        return loss, embed.parameters() + mod.parameters()

    def attention():
        block = AttnBlock(Init(seed, "attn"), 8, 2, ctx_norm=True)
        x, ctx = Tensor(rng.normal((2, 5, 8))), Tensor(rng.normal((2, 3, 8)))
        w = Tensor(rng.normal((2, 5, 8)))
        return (lambda: ops.sum(ops.mul(block(x, ctx), w))), block.parameters()

    def conditioning():
        cond = Conditioner(CondConfig(S=8, T=3, patch=4, width=8, heads=2, vocab_size=5, text_dim=4), seed)
        exo, ego = rng.uniform(0.0, 1.0, (2, 3, 8, 8)), rng.uniform(0.0, 1.0, (2, 3, 8, 8))
        traj = rng.normal((2, 3, 3)) * 4 + 4
        z = np.zeros((2, 1, 2, 2))

        def loss():
            b = cond(exo, ego, traj, [[0, 3], [1]], z)
            ctx = b.context()
            w = Tensor(np.linspace(-1, 1, ctx.size).reshape(ctx.shape))
            return ops.sum(ops.mul(ctx, w)) + align_loss(b.y_cls_exo, b.y_cls_ego)
        return loss, cond.parameters()

    return {"model:lfae": lfae, "model:cfpm": cfpm, "model:attention": attention,
            "model:conditioning": conditioning}


def run_model_checks(seed: int = 0, names=None) -> dict[str, tuple[float, float, bool]]:
    """Parameter gradients of small composite models; name -> (max error, tolerance, passed)."""
    report = {}
    with precision(np.float64):
        suites = _model_suites(seed)
        for name in sorted(names or suites):
            loss_fn, params = suites[name]()
            errs = check_params(loss_fn, params, seed=seed, h=1e-5)
            worst = max(errs.values()) if errs else 0.0
            report[name] = (worst, MODEL_TOL, worst < MODEL_TOL)
    return report
