"""Flat ``key = value`` run configuration files.

Lines starting with ``#`` (and anything after a ``#``) are comments. Unknown
keys are rejected so typos never silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str) -> tuple:
    return tuple(sorted({p.strip() for p in text.replace(",", " ").split() if p.strip()}))


@dataclass
class RunConfig:
    # data
    dataset: str = "data"
    clips: int = 256
    S: int = 64
    T: int = 8
    clips_per_layout: int = 4
    split_rule: str = "seen"
    # run
    stage: int = 1
    seed: int = 0
    out: str = "runs"
    stage1_ckpt: str = ""
    # optimisation
    iterations: int = 600
    batch: int = 8
    lr: float = 1e-3
    log_every: int = 10
    ckpt_every: int = 0
    eval_clips: int = 16
    # stage 1
    lam: float = 0.1
    c_lat: int = 16
    lfae_width: int = 16
    flow_scale: float = 1.0
    # stage 2
    N: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.1
    dm_loss: str = "l2sq"
    width: int = 64
    unet_base: int = 32
    heads: int = 4
    patch: int = 8
    fuse_mode: str = "ide"
    disable: tuple = field(default_factory=tuple)
    stop_ego_grad: bool = False
    eval_draws: int = 4
    # generation
    gen_batch: int = 8

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def echo(self) -> str:
        lines = []
        for k, v in self.items():
            if isinstance(v, tuple):
                v = ",".join(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


# accepted spellings for a few keys
ALIASES = {"lambda": "lam", "λ": "lam", "output": "out", "out_dir": "out"}


def _converter(ftype):
    name = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    return {"int": int, "float": float, "str": str, "bool": _bool, "tuple": _list}[name]


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        try:
            setattr(cfg, key, _converter(types[key])(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} (line {lineno}): {exc}") from exc
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def validate(cfg: RunConfig) -> None:
    if cfg.stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {cfg.stage}")
    if cfg.S not in (32, 64, 128):
        raise ConfigError(f"S must be 32, 64 or 128, got {cfg.S}")
    if cfg.T < 2:
        raise ConfigError(f"T must be at least 2, got {cfg.T}")
    if cfg.clips < 10:
        raise ConfigError(f"clips must be at least 10, got {cfg.clips}")
    if cfg.split_rule not in ("seen", "unseen"):
        raise ConfigError(f"split_rule must be 'seen' or 'unseen', got {cfg.split_rule!r}")
    for key in ("iterations", "batch", "N", "eval_clips", "eval_draws", "gen_batch", "log_every"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be positive")
    if cfg.lam < 0:
        raise ConfigError("lam must be non-negative")
    if cfg.lr <= 0:
        raise ConfigError("lr must be positive")
    if not (0 < cfg.beta_min <= cfg.beta_max < 1):
        raise ConfigError(f"invalid beta range [{cfg.beta_min}, {cfg.beta_max}]")
    from .conditioning import ABLATIONS, FUSE_MODES
    from .diffusion import DM_LOSSES
    bad = [d for d in cfg.disable if d not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown module in disable: {bad[0]!r}")
    if cfg.fuse_mode not in FUSE_MODES:
        raise ConfigError(f"unknown fuse_mode {cfg.fuse_mode!r}")
    if cfg.dm_loss not in DM_LOSSES:
        raise ConfigError(f"unknown dm_loss {cfg.dm_loss!r}")
    if cfg.width % cfg.heads:
        raise ConfigError("width must be divisible by heads")
