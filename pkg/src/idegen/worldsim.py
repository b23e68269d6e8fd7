"""Procedural paired ego/exo clips with ground-truth motion.

A room is seen from a fixed overhead (exocentric) camera. An agent, drawn
as a dark disc with a pink heading wedge, performs one scripted action with
respect to a target object. The egocentric frame is a window of the same
raster ahead of the agent, rotated into the agent's heading.

Dataset layout on disk::

    root/manifest.tsv          clip_id, seed, split, action, T, S
    root/vocab.tsv             token, id
    root/<clip_id>/ego/0000.ppm ...
    root/<clip_id>/exo/0000.ppm ...
    root/<clip_id>/traj.csv    frame,x,y,theta
    root/<clip_id>/desc.txt    space separated tokens
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff.rng import Rng, derive_seed
from .errors import ConfigError, DataError, VocabularyError

log = logging.getLogger(__name__)

VERBS = ("approach", "retreat", "circle", "face")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "magenta": (0.85, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.25, 0.70),
    "white": (0.97, 0.97, 0.97),
    "brown": (0.55, 0.35, 0.15),
}
SHAPES = ("box", "ball", "bar", "pillar", "ring", "cross")
COLOR_NAMES = tuple(COLORS)
VOCAB = VERBS + COLOR_NAMES + SHAPES

FLOORS = ((0.62, 0.60, 0.56), (0.55, 0.58, 0.60), (0.66, 0.62, 0.52), (0.58, 0.56, 0.62))
WALL = (0.15, 0.15, 0.18)
AGENT_BODY = (0.05, 0.05, 0.05)
AGENT_WEDGE = (1.00, 0.50, 0.70)

BODY, WEDGE = 1, 2


@dataclass
class WorldConfig:
    S: int = 64
    T: int = 8
    clips: int = 256
    clips_per_layout: int = 4
    min_objects: int = 1
    max_objects: int = 4
    split_rule: str = "seen"
    max_retries: int = 50

    def validate(self) -> None:
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.S not in (32, 64, 128):
            raise ConfigError(f"S must be one of 32, 64 (128 at paper scale), got {self.S}")
        if self.clips < 10:
            raise ConfigError(f"clip count must be >= 10, got {self.clips}")
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            raise ConfigError("object count range must satisfy 1 <= min <= max <= 6")
        if self.split_rule not in ("seen", "unseen"):
            raise ConfigError(f"split_rule must be 'seen' or 'unseen', got {self.split_rule!r}")
        if self.clips_per_layout < 1:
            raise ConfigError("clips_per_layout must be >= 1")

    @property
    def agent_radius(self) -> float:
        return self.S / 10.0

    @property
    def v_max(self) -> float:
        return self.S / 32.0


@dataclass
class SceneObject:
    color: str
    shape: str
    cx: float
    cy: float
    hw: float  # half extents of the axis-aligned footprint
    hh: float

    @property
    def radius(self) -> float:
        return math.hypot(self.hw, self.hh)


@dataclass
class SceneState:
    S: int
    floor: tuple
    objects: list = field(default_factory=list)
    agent_radius: float = 6.4
    wedge_half_angle: float = math.pi / 5
    draw_wedge: bool = True


@dataclass
class ActionSpec:
    verb: str
    target: int  # index into scene.objects

    def describe(self, scene: SceneState) -> list[str]:
        obj = scene.objects[self.target]
        return [self.verb, obj.color, obj.shape]


@dataclass
class Clip:
    clip_id: str
    seed: int
    split: str
    ego: np.ndarray  # [T,3,S,S] float32 in [0,1]
    exo: np.ndarray  # [T,3,S,S]
    trajectory: np.ndarray  # [T,3] (x px, y px, theta rad)
    description: list  # token ids
    words: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.exo.shape[0]

    @property
    def layout(self) -> str:
        return layout_of(self.clip_id)


def layout_of(clip_id: str) -> str:
    return clip_id.split("c")[0]


# -- scene construction ---------------------------------------------------

def _shape_extent(shape: str, S: int) -> tuple[float, float]:
    u = S / 64.0
    return {
        "box": (5 * u, 5 * u), "ball": (5 * u, 5 * u), "bar": (8 * u, 3 * u),
        "pillar": (3 * u, 8 * u), "ring": (6 * u, 6 * u), "cross": (6 * u, 6 * u),
    }[shape]


def make_scene(cfg: WorldConfig, rng: Rng) -> SceneState:
    S = cfg.S
    scene = SceneState(S=S, floor=FLOORS[rng.integers(0, len(FLOORS))], agent_radius=cfg.agent_radius)
    k = rng.integers(cfg.min_objects, cfg.max_objects + 1)
    colors = list(COLOR_NAMES)
    margin = 2.0
    for _ in range(k):
        for _attempt in range(200):
            shape = rng.choice(SHAPES)
            hw, hh = _shape_extent(shape, S)
            cx = float(rng.uniform(hw + 4, S - 1 - hw - 4))
            cy = float(rng.uniform(hh + 4, S - 1 - hh - 4))
            clash = any(abs(cx - o.cx) < hw + o.hw + margin and abs(cy - o.cy) < hh + o.hh + margin
                        for o in scene.objects)
            if not clash:
                color = colors.pop(rng.integers(0, len(colors)))
                scene.objects.append(SceneObject(color, shape, round(cx), round(cy), hw, hh))
                break
    return scene


# -- rasterisation --------------------------------------------------------

def _grid(S: int):
    ys, xs = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), indexing="ij")
    return xs, ys


def _object_mask(obj: SceneObject, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy = xs - obj.cx, ys - obj.cy
    if obj.shape in ("box", "bar", "pillar"):
        return (np.abs(dx) <= obj.hw) & (np.abs(dy) <= obj.hh)
    r2 = dx * dx + dy * dy
    if obj.shape == "ball":
        return r2 <= obj.hw ** 2
    if obj.shape == "ring":
        return (r2 <= obj.hw ** 2) & (r2 >= (obj.hw * 0.5) ** 2)
    arm = obj.hw * (1.0 / 3.0)
    return ((np.abs(dx) <= obj.hw) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= obj.hh) & (np.abs(dx) <= arm))


def agent_labels(scene: SceneState, pose, xs: Optional[np.ndarray] = None,
                 ys: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-pixel agent label: 0 none, 1 body, 2 heading wedge."""
    if xs is None:
        xs, ys = _grid(scene.S)
    x, y, th = pose
    dx, dy = xs - x, ys - y
    inside = dx * dx + dy * dy <= scene.agent_radius ** 2
    labels = inside.astype(np.int8)
    if scene.draw_wedge:
        # angle of the pixel relative to the heading, wrapped to (-pi, pi]
        rel = np.arctan2(dy, dx) - th
        rel = np.arctan2(np.sin(rel), np.cos(rel))
        labels[inside & (np.abs(rel) <= scene.wedge_half_angle)] = WEDGE
    return labels


def render_background(scene: SceneState) -> np.ndarray:
    S = scene.S
    xs, ys = _grid(S)
    tile = ((xs // 8 + ys // 8) % 2) * 0.04 - 0.02
    frame = np.empty((3, S, S))
    for c in range(3):
        frame[c] = scene.floor[c] + tile
    for obj in scene.objects:
        mask = _object_mask(obj, xs, ys)
        for c in range(3):
            frame[c][mask] = COLORS[obj.color][c]
    return frame


def render_exo(scene: SceneState, pose, background: Optional[np.ndarray] = None) -> np.ndarray:
    """Overhead frame [3,S,S] in [0,1]: floor, objects, then the agent."""
    frame = (render_background(scene) if background is None else background).copy()
    labels = agent_labels(scene, pose)
    for c in range(3):
        frame[c][labels == BODY] = AGENT_BODY[c]
        frame[c][labels == WEDGE] = AGENT_WEDGE[c]
    return frame


def _bilinear(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(px), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(py), h - 2).astype(np.int64)
    ax, ay = px - x0, py - y0
    top = img[:, y0, x0] * (1 - ax) + img[:, y0, x0 + 1] * ax
    bot = img[:, y0 + 1, x0] * (1 - ax) + img[:, y0 + 1, x0 + 1] * ax
    return top * (1 - ay) + bot * ay


def render_ego(scene: SceneState, pose, exo: Optional[np.ndarray] = None) -> np.ndarray:
    """Egocentric frame [3,S,S]: the half-plane ahead of the agent.

    Ego column ``c`` is the distance ahead, row ``r`` the lateral offset
    ``r - S/2``; at heading 0 with integer position this is an exact crop of
    the exo frame. Outside the room the wall colour is sampled.
    """
    S = scene.S
    if exo is None:
        exo = render_exo(scene, pose)
    padded = np.empty((3, 3 * S, 3 * S))
    for c in range(3):
        padded[c] = WALL[c]
    padded[:, S:2 * S, S:2 * S] = exo
    x, y, th = pose
    fwd, lat = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64) - S // 2, indexing="xy")
    cos_t, sin_t = math.cos(th), math.sin(th)
    wx = x + fwd * cos_t - lat * sin_t
    wy = y + fwd * sin_t + lat * cos_t
    return _bilinear(padded, wx + S, wy + S)


# -- ground-truth motion --------------------------------------------------

def gt_backward_flow(scene: SceneState, pose_i, pose_j) -> tuple[np.ndarray, np.ndarray]:
    """Backward flow from frame j to frame i, plus a binary validity mask.

    Returns ``(flow [2,S,S], occ [1,S,S])``. Flow is in normalized units (a
    full image spans 2). Background is static so its flow is zero; agent
    pixels move rigidly with the pose. ``occ`` is 0 where the warp cannot
    reproduce frame j: background uncovered by the agent's departure, and
    agent pixels whose bilinear footprint in frame i straddles a sprite
    boundary.
    """
    S = scene.S
    xs, ys = _grid(S)
    lab_i = agent_labels(scene, pose_i, xs, ys)
    lab_j = agent_labels(scene, pose_j, xs, ys)
    xi, yi, ti = pose_i
    xj, yj, tj = pose_j
    dth = ti - tj
    c, s = math.cos(dth), math.sin(dth)
    rx, ry = xs - xj, ys - yj
    # displacement written so identical poses give exactly zero
    dx = (xi - xj) + (c - 1.0) * rx - s * ry
    dy = (yi - yj) + s * rx + (c - 1.0) * ry
    agent = lab_j > 0
    dx = np.where(agent, dx, 0.0)
    dy = np.where(agent, dy, 0.0)
    flow = np.stack([dx * (2.0 / S), dy * (2.0 / S)])

    occ = np.ones((S, S))
    occ[(~agent) & (lab_i > 0)] = 0.0
    qx, qy = xs + dx, ys + dy
    x0, y0 = np.floor(qx), np.floor(qy)
    x1 = np.where(qx > x0, x0 + 1, x0)
    y1 = np.where(qy > y0, y0 + 1, y0)
    valid = agent.copy()
    for cx in (x0, x1):
        for cy in (y0, y1):
            inb = (cx >= 0) & (cx <= S - 1) & (cy >= 0) & (cy <= S - 1)
            cxi = np.clip(cx, 0, S - 1).astype(np.int64)
            cyi = np.clip(cy, 0, S - 1).astype(np.int64)
            valid &= inb & (lab_i[cyi, cxi] == lab_j)
    occ[agent & ~valid] = 0.0
    return flow, occ[None]


def warp_numpy(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Plain-numpy backward warp matching ``ops.grid_sample_bilinear``."""
    _, h, w = src.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _bilinear(src, xs + flow[0] * (w / 2.0), ys + flow[1] * (h / 2.0))


# -- action scripting -----------------------------------------------------

class ScriptError(RuntimeError):
    pass


def _in_room(p, S: int, r: float) -> bool:
    return r <= p[0] <= S - 1 - r and r <= p[1] <= S - 1 - r


def script_action(action: ActionSpec, scene: SceneState, rng: Rng, T: int, v_max: float) -> np.ndarray:
    """Pose sequence [T,3] for ``action``; raises ScriptError if no valid spawn is found."""
    S = scene.S
    r_a = scene.agent_radius
    obj = scene.objects[action.target]
    c = np.array([obj.cx, obj.cy], dtype=np.float64)
    clear = obj.radius + r_a + 2.0
    steps = np.arange(T, dtype=np.float64)
    for _ in range(100):
        v = float(rng.uniform(0.6, 1.0)) * v_max
        if action.verb == "approach":
            p0 = np.array([rng.uniform(r_a, S - 1 - r_a), rng.uniform(r_a, S - 1 - r_a)])
            d0 = float(np.linalg.norm(p0 - c))
            if d0 < clear + (T - 1) * v:
                continue
            u = (c - p0) / d0
            pos = p0[None] + steps[:, None] * v * u[None]
            theta = np.full(T, math.atan2(u[1], u[0]))
        elif action.verb == "retreat":
            phi = float(rng.uniform(-math.pi, math.pi))
            u = np.array([math.cos(phi), math.sin(phi)])
            p0 = c + u * (clear + float(rng.uniform(0.0, 4.0)))
            pos = p0[None] + steps[:, None] * v * u[None]
            theta = np.full(T, phi)
        elif action.verb == "circle":
            r0 = clear + float(rng.uniform(1.0, 8.0))
            phi0 = float(rng.uniform(-math.pi, math.pi))
            omega = (v / r0) * (1.0 if rng.random() < 0.5 else -1.0)
            ang = phi0 + omega * steps
            pos = c[None] + r0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            theta = np.arctan2(c[1] - pos[:, 1], c[0] - pos[:, 0])
            theta = np.unwrap(theta)
        elif action.verb == "face":
            phi = float(rng.uniform(-math.pi, math.pi))
            p0 = c + np.array([math.cos(phi), math.sin(phi)]) * (clear + float(rng.uniform(2.0, 10.0)))
            pos = np.repeat(p0[None], T, axis=0)
            goal = math.atan2(c[1] - p0[1], c[0] - p0[0])
            turn = float(rng.uniform(0.15, 0.35)) * (1.0 if rng.random() < 0.5 else -1.0)
            theta = goal - turn * (T - 1 - steps)
        else:
            raise ValueError(f"unknown verb {action.verb!r}")
        if all(_in_room(p, S, r_a) for p in pos):
            return np.concatenate([pos, theta[:, None]], axis=1)
    raise ScriptError(f"no valid spawn for {action.verb} target {action.target}")


# -- clips and datasets ---------------------------------------------------

def to_u8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)


def from_u8(frame: np.ndarray) -> np.ndarray:
    return frame.astype(np.float32) / np.float32(255.0)


def clip_id_for(layout: int, index: int) -> str:
    return f"l{layout:03d}c{index:02d}"


def generate_clip(cfg: WorldConfig, seed: int, layout: int, index: int) -> tuple[Clip, SceneState]:
    """Build one clip. The layout (room + objects) depends only on (seed, layout)."""
    layout_rng = Rng(derive_seed(seed, "layout", layout))
    scene = make_scene(cfg, layout_rng)
    cid = clip_id_for(layout, index)
    clip_seed = derive_seed(seed, "clip", cid)
    rng = Rng(clip_seed)
    for attempt in range(cfg.max_retries):
        action = ActionSpec(rng.choice(VERBS), rng.integers(0, len(scene.objects)))
        try:
            traj = script_action(action, scene, rng, cfg.T, cfg.v_max)
            break
        except ScriptError:
            log.debug("clip %s: retry %d after failed spawn", cid, attempt)
    else:
        raise ScriptError(f"clip {cid}: no valid action after {cfg.max_retries} retries")
    words = action.describe(scene)
    background = render_background(scene)
    exo = np.empty((cfg.T, 3, cfg.S, cfg.S), dtype=np.float32)
    ego = np.empty_like(exo)
    for t in range(cfg.T):
        e = render_exo(scene, traj[t], background)
        exo[t] = from_u8(to_u8(e))
        ego[t] = from_u8(to_u8(render_ego(scene, traj[t], e)))
    ids = [VOCAB.index(w) for w in words]
    return Clip(cid, clip_seed, "", ego, exo, traj, ids, words), scene


def assign_splits(clip_ids: list[str], rule: str, seed: int) -> dict[str, str]:
    """8:2 train/test split at clip level ("seen") or layout level ("unseen")."""
    rng = Rng(derive_seed(seed, "split", rule))
    if rule == "seen":
        order = rng.permutation(len(clip_ids))
        n_test = max(1, round(0.2 * len(clip_ids)))
        test = {clip_ids[i] for i in order[:n_test]}
        return {cid: "seen-test" if cid in test else "seen-train" for cid in clip_ids}
    layouts = sorted({layout_of(c) for c in clip_ids})
    order = rng.permutation(len(layouts))
    n_test = max(1, round(0.2 * len(layouts)))
    test = {layouts[i] for i in order[:n_test]}
    return {cid: "unseen-test" if layout_of(cid) in test else "unseen-train" for cid in clip_ids}


def write_ppm(path: Path, frame: np.ndarray) -> None:
    """Binary P6, maxval 255, from a [3,H,W] float frame in [0,1]."""
    u8 = to_u8(frame)
    _, h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: not a P6/255 PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_u8(data.reshape(h, w, 3).transpose(2, 0, 1))


def _write_clip(root: Path, clip: Clip) -> None:
    d = root / clip.clip_id
    (d / "ego").mkdir(parents=True, exist_ok=True)
    (d / "exo").mkdir(parents=True, exist_ok=True)
    for t in range(clip.T):
        write_ppm(d / "ego" / f"{t:04d}.ppm", clip.ego[t])
        write_ppm(d / "exo" / f"{t:04d}.ppm", clip.exo[t])
    write_trajectory(d / "traj.csv", clip.trajectory)
    (d / "desc.txt").write_text(" ".join(clip.words) + "\n", encoding="utf-8")


def write_trajectory(path: Path, traj: np.ndarray) -> None:
    lines = ["frame,x,y,theta"]
    lines += [f"{t},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}" for t, p in enumerate(traj)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectory(path: Path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
    traj = np.array([[float(v) for v in r.split(",")[1:]] for r in rows], dtype=np.float64)
    if traj.size and not np.isfinite(traj).all():
        raise DataError(f"{path}: non-finite pose")
    return traj.reshape(-1, 3)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("IDE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ManifestEntry:
    clip_id: str
    seed: int
    split: str
    action: str
    T: int
    S: int


@dataclass
class Dataset:
    root: Path
    entries: list
    vocab: dict

    def ids(self, split: Optional[str] = None) -> list[str]:
        return [e.clip_id for e in self.entries if split is None or e.split.endswith(split)]

    def entry(self, clip_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.clip_id == clip_id:
                return e
        raise DataError(f"clip {clip_id!r} not in manifest")

    def load_clip(self, clip_id: str) -> Clip:
        e = self.entry(clip_id)
        d = self.root / clip_id
        try:
            ego = np.stack([read_ppm(d / "ego" / f"{t:04d}.ppm") for t in range(e.T)])
            exo = np.stack([read_ppm(d / "exo" / f"{t:04d}.ppm") for t in range(e.T)])
        except FileNotFoundError as exc:
            raise DataError(f"clip {clip_id}: missing frame ({exc.filename})") from exc
        traj = read_trajectory(d / "traj.csv")
        words = (d / "desc.txt").read_text(encoding="utf-8").split()
        if len(traj) != e.T or ego.shape[-1] != e.S:
            raise DataError(f"clip {clip_id}: files disagree with manifest (T={e.T}, S={e.S})")
        return Clip(clip_id, e.seed, e.split, ego, exo, traj, tokenize(words, self.vocab), words)


def tokenize(words, vocab: dict) -> list[int]:
    ids = []
    for w in words:
        if w not in vocab:
            raise VocabularyError(f"token {w!r} not in vocabulary")
        ids.append(vocab[w])
    return ids


def generate_dataset(cfg: WorldConfig, seed: int, root) -> Dataset:
    """Write a complete dataset under ``root`` and return its handle."""
    cfg.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    n_layouts = math.ceil(cfg.clips / cfg.clips_per_layout)
    jobs = [(k // cfg.clips_per_layout, k % cfg.clips_per_layout) for k in range(cfg.clips)]
    assert len(jobs) <= n_layouts * cfg.clips_per_layout

    def run(job):
        clip, _ = generate_clip(cfg, seed, *job)
        _write_clip(root, clip)
        return clip

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        clips = list(pool.map(run, jobs))
    splits = assign_splits([c.clip_id for c in clips], cfg.split_rule, seed)
    vocab = {w: i for i, w in enumerate(VOCAB)}
    lines = ["clip_id\tseed\tsplit\taction\tT\tS"]
    entries = []
    for c in clips:
        e = ManifestEntry(c.clip_id, c.seed, splits[c.clip_id], " ".join(c.words), cfg.T, cfg.S)
        entries.append(e)
        lines.append(f"{e.clip_id}\t{e.seed}\t{e.split}\t{e.action}\t{e.T}\t{e.S}")
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "vocab.tsv").write_text("token\tid\n" + "".join(f"{w}\t{i}\n" for w, i in vocab.items()),
                                    encoding="utf-8")
    return Dataset(root, entries, vocab)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        rows = (root / "manifest.tsv").read_text(encoding="utf-8").strip().splitlines()
        vrows = (root / "vocab.tsv").read_text(encoding="utf-8").strip().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"{root}: missing {Path(exc.filename).name}") from exc
    entries = []
    for r in rows[1:]:
        parts = r.split("\t")
        if len(parts) != 6:
            raise DataError(f"malformed manifest row: {r!r}")
        cid, seed, split, action, T, S = parts
        entries.append(ManifestEntry(cid, int(seed), split, action, int(T), int(S)))
    vocab = {}
    for r in vrows[1:]:
        tok, idx = r.split("\t")
        vocab[tok] = int(idx)
    listed = {e.clip_id for e in entries}
    present = {p.name for p in root.iterdir() if p.is_dir()}
    if listed != present:
        raise DataError(f"manifest/directory mismatch: missing={sorted(listed - present)[:5]} "
                        f"extra={sorted(present - listed)[:5]}")
    for e in entries:
        tokenize(e.action.split(), vocab)
    return Dataset(root, entries, vocab)
