"""Two-stage train / generate / evaluate workflow on top of the model modules."""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff.rng import derive_seed
from .autodiff.tensor import Tensor, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import ClipCondInputs, NoiseSchedule, Stage2Config, Stage2Model, bundle_for, prepare_clips, sample_sequence, \
    train_stage2
from .errors import CheckpointError, ConfigError, DataError, PrerequisiteError
from .lfae import LatentFlowAE, PerceptualNet, Stage1Config, train_stage1, warp
from .worldsim import Dataset, WorldConfig, generate_dataset, load_dataset, read_ppm, read_trajectory, \
    to_u8, tokenize, write_ppm

log = logging.getLogger(__name__)


# -- config translation ---------------------------------------------------------

def world_config(cfg: RunConfig) -> WorldConfig:
    return WorldConfig(S=cfg.S, T=cfg.T, clips=cfg.clips, clips_per_layout=cfg.clips_per_layout,
                       split_rule=cfg.split_rule)


def stage1_config(cfg: RunConfig) -> Stage1Config:
    return Stage1Config(S=cfg.S, c_lat=cfg.c_lat, width=cfg.lfae_width, flow_scale=cfg.flow_scale, lam=cfg.lam,
                        lr=cfg.lr, iterations=cfg.iterations, batch=cfg.batch, log_every=cfg.log_every,
                        ckpt_every=cfg.ckpt_every, eval_clips=cfg.eval_clips)


def stage2_config(cfg: RunConfig) -> Stage2Config:
    return Stage2Config(iterations=cfg.iterations, batch=cfg.batch, lr=cfg.lr, N=cfg.N, beta_min=cfg.beta_min,
                        beta_max=cfg.beta_max, dm_loss=cfg.dm_loss, width=cfg.width, base=cfg.unet_base,
                        heads=cfg.heads, patch=cfg.patch, disable=tuple(cfg.disable), fuse_mode=cfg.fuse_mode,
                        stop_ego_grad=cfg.stop_ego_grad, log_every=cfg.log_every, ckpt_every=cfg.ckpt_every,
                        eval_clips=cfg.eval_clips, eval_draws=cfg.eval_draws)


def _open_dataset(path) -> Dataset:
    if not (Path(path) / "manifest.tsv").exists():
        raise PrerequisiteError(f"no dataset at {path} (manifest.tsv missing); run gen-data first")
    return load_dataset(path)


# -- stage 1 ------------------------------------------------------------------------

def save_stage1(path, model: LatentFlowAE, per: PerceptualNet) -> None:
    meta = {"kind": "stage1", "stage1": asdict(model.cfg)}
    save_checkpoint(path, {**model.state_dict(), **per.state_dict()}, meta)


def load_stage1(path) -> LatentFlowAE:
    """Rebuild the frozen stage-1 model from a stage-1 or stage-2 checkpoint."""
    ck = _read(path)
    if "stage1" not in ck.meta:
        raise CheckpointError(f"{path} does not contain a stage-1 model")
    model = LatentFlowAE(Stage1Config(**ck.meta["stage1"]), seed=0)
    model.load_state_dict(ck.with_prefix("lfae."))
    model.freeze()
    return model


def _read(path) -> Checkpoint:
    if not path or not Path(path).exists():
        raise PrerequisiteError(f"checkpoint not found: {path or '(none given)'}")
    return load_checkpoint(path)


def run_stage1(cfg: RunConfig) -> dict:
    ds = _open_dataset(cfg.dataset)
    _check_dataset(ds, cfg)
    _, _, summary = train_stage1(ds, stage1_config(cfg), cfg.seed, cfg.out, save=save_stage1)
    summary["checkpoint"] = str(Path(cfg.out) / "stage1.ckpt")
    return summary


def _check_dataset(ds: Dataset, cfg: RunConfig) -> None:
    e = ds.entries[0]
    if (e.S, e.T) != (cfg.S, cfg.T):
        raise DataError(f"dataset has S={e.S}, T={e.T} but the config asks for S={cfg.S}, T={cfg.T}")


# -- stage 2 ------------------------------------------------------------------------

def stage2_meta(cfg2: Stage2Config, lfae: LatentFlowAE, S: int, T: int, vocab: dict) -> dict:
    d = asdict(cfg2)
    d["disable"] = list(cfg2.disable)
    return {"kind": "stage2", "stage1": asdict(lfae.cfg), "stage2": d, "S": S, "T": T,
            "vocab": sorted(vocab, key=vocab.get)}


def save_stage2(path, model: Stage2Model, lfae: LatentFlowAE, meta: dict) -> None:
    tensors = {**lfae.state_dict(), **model.state_dict()}
    save_checkpoint(path, tensors, meta)


def stored_stage2_config(meta: dict) -> Stage2Config:
    d = dict(meta["stage2"])
    d["disable"] = tuple(d["disable"])
    return Stage2Config(**d)


def load_stage2(path) -> tuple[LatentFlowAE, Stage2Model, dict]:
    ck = _read(path)
    if ck.meta.get("kind") != "stage2":
        raise CheckpointError(f"{path} is not a stage-2 checkpoint")
    lfae = LatentFlowAE(Stage1Config(**ck.meta["stage1"]), seed=0)
    lfae.load_state_dict(ck.with_prefix("lfae."))
    lfae.freeze()
    cfg2 = stored_stage2_config(ck.meta)
    model = Stage2Model(cfg2.cond_config(ck.meta["S"], ck.meta["T"], len(ck.meta["vocab"])),
                        cfg2.denoiser_config(lfae.cfg.c_lat))
    own = {k: v for k, v in ck.tensors.items() if not k.startswith("lfae.")}
    try:
        model.load_state_dict(own)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: tensors do not match the stored configuration ({exc})") from exc
    return lfae, model, ck.meta


def run_stage2(cfg: RunConfig, stage1_ckpt: Optional[str] = None, data=None) -> dict:
    """Train stage 2. ``data`` may carry precomputed (train, heldout) clip inputs."""
    path = stage1_ckpt or cfg.stage1_ckpt
    if not path:
        raise PrerequisiteError("stage 2 needs a stage-1 checkpoint (--stage1-ckpt)")
    lfae = load_stage1(path)
    ds = _open_dataset(cfg.dataset)
    _check_dataset(ds, cfg)
    cfg2 = stage2_config(cfg)
    if data is None:
        data = prepare_stage2_data(ds, lfae, cfg2)
    train_items, heldout = data
    meta = stage2_meta(cfg2, lfae, cfg.S, cfg.T, ds.vocab)

    def save(p, model):
        save_stage2(p, model, lfae, meta)

    _, summary = train_stage2(train_items, heldout, cfg2, cfg.seed, cfg.S, lfae.cfg.c_lat, len(ds.vocab),
                              out_dir=cfg.out, save=save)
    summary["checkpoint"] = str(Path(cfg.out) / "stage2.ckpt")
    return summary


def prepare_stage2_data(ds: Dataset, lfae: LatentFlowAE, cfg2: Stage2Config,
                        keep_video: bool = True) -> tuple[list, list]:
    video = keep_video and cfg2.fuse_mode == "ego_video_feats"
    train_items = prepare_clips(ds, ds.ids("train"), lfae, keep_video=video)
    heldout = prepare_clips(ds, ds.ids("test")[: cfg2.eval_clips], lfae, keep_video=video)
    return train_items, heldout


# -- generation --------------------------------------------------------------------

def clip_inputs_from_dataset(ds: Dataset, clip_id: str) -> ClipCondInputs:
    clip = ds.load_clip(clip_id)
    return ClipCondInputs(clip_id, clip.exo[0], clip.ego[0], clip.trajectory, list(clip.description),
                          x0=None, z=None, ego_video=clip.ego)


def clip_inputs_from_files(exo1, ego1, traj, words: Sequence[str], vocab: dict,
                           clip_id: str = "custom") -> ClipCondInputs:
    tokens = tokenize(list(words), vocab)
    return ClipCondInputs(clip_id, read_ppm(exo1), read_ppm(ego1), read_trajectory(traj),
                          tokens, x0=None, z=None)


def generate_frames(lfae: LatentFlowAE, model: Stage2Model, items: list[ClipCondInputs], seed: int,
                    sched: NoiseSchedule, dump: bool = False):
    """Sample flow/occlusion for each clip, warp the first-frame latent and decode.

    Returns one dict per clip: frames [T,3,S,S], flow [T,2,h,w], occ [T,1,h,w]
    and, when ``dump`` is set, the per-step states.
    """
    with no_grad():
        for c in items:
            c.z = lfae.encode(c.exo1).data
        bundle = bundle_for(model, items)
    steps: dict = {}

    def dumper(n, x):
        steps[n] = x.copy()

    # one stream per clip so a clip's sample does not depend on its batch neighbours
    seeds = [derive_seed(seed, c.clip_id) for c in items]
    flow, occ = sample_sequence(model, bundle, sched, seeds, dump=dumper if dump else None)
    out = []
    with no_grad():
        for b, c in enumerate(items):
            T = flow.shape[1]
            zt = np.broadcast_to(c.z, (T,) + c.z.shape).copy()
            frames = lfae.decode(warp(Tensor(zt), Tensor(flow[b]), Tensor(occ[b]))).data
            rec = {"clip_id": c.clip_id, "frames": frames, "flow": flow[b], "occ": occ[b]}
            if dump:
                rec["steps"] = {n: x[b] for n, x in steps.items()}
            out.append(rec)
    return out


def flow_to_rgb(flow: np.ndarray, scale: Optional[float] = None) -> np.ndarray:
    """Direction -> hue, magnitude -> value. flow [2,h,w] -> [3,h,w] in [0,1]."""
    fx, fy = flow[0].astype(np.float64), flow[1].astype(np.float64)
    mag = np.hypot(fx, fy)
    scale = scale or max(float(mag.max()), 1e-6)
    hue = (np.arctan2(fy, fx) / (2 * np.pi)) % 1.0
    val = np.clip(mag / scale, 0.0, 1.0)
    sat = np.ones_like(val)
    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    table = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros((3,) + val.shape)
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[0][sel], rgb[1][sel], rgb[2][sel] = r[sel], g[sel], b[sel]
    return rgb


def _upsample_nearest(img: np.ndarray, S: int) -> np.ndarray:
    k = S // img.shape[-1]
    return np.repeat(np.repeat(img, k, axis=-2), k, axis=-1)


def write_generation(out_dir, rec: dict, S: int, flow_vis: bool = False) -> None:
    d = Path(out_dir) / rec["clip_id"]
    (d / "exo").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(rec["frames"]):
        write_ppm(d / "exo" / f"{t:04d}.ppm", frame)
    if flow_vis:
        (d / "flow").mkdir(exist_ok=True)
        (d / "occ").mkdir(exist_ok=True)
        scale = max(float(np.hypot(rec["flow"][:, 0], rec["flow"][:, 1]).max()), 1e-6)
        for t in range(len(rec["frames"])):
            write_ppm(d / "flow" / f"{t:04d}.ppm", _upsample_nearest(flow_to_rgb(rec["flow"][t], scale), S))
            occ = np.repeat(rec["occ"][t], 3, axis=0)
            write_ppm(d / "occ" / f"{t:04d}.ppm", _upsample_nearest(occ, S))
    if "steps" in rec:
        save_checkpoint(d / "steps.ckpt", {f"x_{n:04d}": x for n, x in sorted(rec["steps"].items(), reverse=True)})


def run_generate(ckpt, out_dir, seed: int, dataset=None, clip_ids: Sequence[str] = (), split: Optional[str] = None,
                 files: Optional[dict] = None, gen_batch: int = 8, flow_vis: bool = False,
                 dump_steps: bool = False) -> list[str]:
    lfae, model, meta = load_stage2(ckpt)
    S = meta["S"]
    sched = stored_stage2_config(meta).schedule()
    if files is not None:
        if model.cond.fuse_video is not None:
            raise ConfigError("fuse_mode ego_video_feats needs ego video frames; generate from a dataset clip")
        vocab = {w: i for i, w in enumerate(meta["vocab"])}
        items = [clip_inputs_from_files(files["exo1"], files["ego1"], files["traj"], files["words"], vocab)]
        if len(items[0].traj) != meta["T"]:
            raise DataError(f"trajectory has {len(items[0].traj)} frames, the model was trained on T={meta['T']}")
    else:
        ds = _open_dataset(dataset)
        ids = list(clip_ids) or ds.ids(split or "test")
        if not ids:
            raise DataError("no clips selected for generation")
        items = [clip_inputs_from_dataset(ds, cid) for cid in ids]
    for c in items:
        if c.exo1.shape[-1] != S:
            raise DataError(f"clip {c.clip_id}: frame size {c.exo1.shape[-1]} but the model expects {S}")
    written = []
    for s in range(0, len(items), gen_batch):
        for rec in generate_frames(lfae, model, items[s:s + gen_batch], seed, sched, dump=dump_steps):
            write_generation(out_dir, rec, S, flow_vis)
            written.append(rec["clip_id"])
    return written


def run_gen_data(cfg: RunConfig, seed: int, out=None) -> Dataset:
    return generate_dataset(world_config(cfg), seed, out or cfg.dataset)


__all__ = [
    "world_config", "stage1_config", "stage2_config", "run_gen_data", "run_stage1", "run_stage2",
    "load_stage1", "load_stage2", "run_generate", "generate_frames", "flow_to_rgb", "to_u8",
]
