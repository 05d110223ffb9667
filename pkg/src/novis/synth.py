"""Synthetic occlusion videos: moving coloured shapes with persistent identities."""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rle
from .losses import ClipGroundTruth
from .model import prepare_frames

CLASS_NAMES = ("disc", "square", "triangle")


class GenerationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class ObjectSpec:
    cls: int
    size: float
    color: tuple
    start: tuple                      # (x, y) centre at frame 0
    velocity: tuple                   # pixels per frame
    z: int
    trajectory: str = "linear"        # "linear" | "sinusoidal"
    amplitude: float = 0.0
    period: float = 12.0
    phase: float = 0.0
    occlusion: tuple | None = None    # scripted [start, end) frames where the object is hidden


@dataclass
class VideoSpec:
    num_frames: int
    objects: list
    height: int = 64
    width: int = 64
    num_classes: int = 3
    background: float = 0.15
    noise: float = 0.03


@dataclass
class Video:
    video_id: str
    frames: np.ndarray                # uint8 [T, H, W, 3]
    masks: np.ndarray                 # bool [O, T, H, W], visible pixels only
    classes: np.ndarray               # [O]
    ids: np.ndarray                   # [O]
    split: str = "train"

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def ground_truth(self) -> ClipGroundTruth:
        return ClipGroundTruth(self.classes, self.masks, self.ids)


@dataclass
class ClipBatch:
    frames: np.ndarray                # float [T, 3, H, W]
    gt: ClipGroundTruth
    frame_indices: np.ndarray         # source frames in clip order
    reversed: bool = False
    flipped: bool = False


@dataclass
class DatasetConfig:
    num_train: int = 40
    num_val: int = 12
    num_frames: int = 24
    height: int = 64
    width: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    occlusion_prob: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"num_classes must be {len(CLASS_NAMES)} (shapes: {', '.join(CLASS_NAMES)})")
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            raise ValueError("object count range must satisfy 1 <= min <= max <= 6")
        if self.height % 16 or self.width % 16:
            raise ValueError("frame size must be divisible by 16")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")


# -- rendering -------------------------------------------------------------------

def _reflect(p: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def object_center(obj: ObjectSpec, t: int, width: int, height: int) -> tuple:
    lo_x, hi_x = obj.size, width - obj.size
    lo_y, hi_y = obj.size, height - obj.size
    x = _reflect(obj.start[0] + obj.velocity[0] * t, lo_x, hi_x)
    y0 = obj.start[1] + obj.velocity[1] * t
    if obj.trajectory == "sinusoidal":
        y0 += obj.amplitude * math.sin(2 * math.pi * t / obj.period + obj.phase)
    y = _reflect(y0, lo_y, hi_y)
    return x, y


def shape_mask(cls: int, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    dx, dy = xs - cx, ys - cy
    if cls == 0:
        return dx * dx + dy * dy <= size * size
    if cls == 1:
        half = 0.85 * size
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if cls == 2:
        top = cy - size
        frac = (ys - top) / (2 * size)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= size * frac)
    raise GenerationError(f"unknown shape class {cls}")


def generate_video(spec: VideoSpec, seed: int, video_id: str = "video", split: str = "train") -> Video:
    """Render ``spec`` deterministically: painter's order by ``z``, visible masks disjoint."""
    rng = np.random.default_rng(seed)
    t_len, h, w = spec.num_frames, spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    tint = rng.uniform(0.7, 1.0, 3)
    gx, gy = rng.uniform(-0.08, 0.08, 2)
    bg = spec.background + gx * xs + gy * ys
    base = np.clip(bg[..., None] * tint, 0, 1)

    objs = list(spec.objects)
    order = sorted(range(len(objs)), key=lambda i: objs[i].z)
    frames = np.empty((t_len, h, w, 3), dtype=np.uint8)
    masks = np.zeros((len(objs), t_len, h, w), dtype=bool)
    for t in range(t_len):
        img = base.copy()
        owner = np.full((h, w), -1, dtype=int)
        for i in order:
            o = objs[i]
            if o.occlusion is not None and o.occlusion[0] <= t < o.occlusion[1]:
                continue
            cx, cy = object_center(o, t, w, h)
            m = shape_mask(o.cls, cx, cy, o.size, h, w)
            img[m] = o.color
            owner[m] = i
        for i in range(len(objs)):
            masks[i, t] = owner == i
        img = img + rng.normal(0.0, spec.noise, img.shape)
        frames[t] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    for i, o in enumerate(objs):
        if not masks[i].any():
            raise GenerationError(f"object {i} ({CLASS_NAMES[o.cls]}) is never visible")
    classes = np.array([o.cls for o in objs], dtype=int)
    return Video(video_id, frames, masks, classes, np.arange(len(objs)), split)


def _distinct_colors(rng: np.random.Generator, n: int) -> list:
    offset = rng.uniform(0, 1)
    hues = (offset + np.arange(n) / n + rng.uniform(-0.04, 0.04, n)) % 1.0
    rng.shuffle(hues)
    cols = []
    for hue in hues:
        r, g, b = colorsys.hsv_to_rgb(float(hue), rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0))
        cols.append((r, g, b))
    return cols


def random_video_spec(rng: np.random.Generator, num_frames: int = 24, height: int = 64,
                      width: int = 64, min_objects: int = 1, max_objects: int = 4,
                      occlusion_prob: float = 0.3) -> VideoSpec:
    n = int(rng.integers(min_objects, max_objects + 1))
    colors = _distinct_colors(rng, n)
    z_order = rng.permutation(n)
    objs = []
    for i in range(n):
        size = float(rng.uniform(5.0, 10.0))
        speed = float(rng.uniform(0.5, 2.5))
        angle = float(rng.uniform(0, 2 * math.pi))
        traj = "sinusoidal" if rng.uniform() < 0.3 else "linear"
        objs.append(ObjectSpec(
            cls=int(rng.integers(0, 3)), size=size, color=colors[i],
            start=(float(rng.uniform(size, width - size)), float(rng.uniform(size, height - size))),
            velocity=(speed * math.cos(angle), speed * math.sin(angle)),
            z=int(z_order[i]), trajectory=traj,
            amplitude=float(rng.uniform(2.0, 6.0)) if traj == "sinusoidal" else 0.0,
            period=float(rng.uniform(8.0, 16.0)), phase=float(rng.uniform(0, 2 * math.pi)),
        ))
    if n > 0 and rng.uniform() < occlusion_prob and num_frames > 6:
        i = int(rng.integers(0, n))
        length = int(rng.integers(1, 4))
        start = int(rng.integers(1, num_frames - length - 1))
        objs[i].occlusion = (start, start + length)
    return VideoSpec(num_frames, objs, height, width)


def crossing_spec(num_frames: int = 16, occluded_frames: int = 2) -> VideoSpec:
    """Two objects crossing horizontally; the small back disc is fully hidden
    behind the large front square for ``occluded_frames`` frames around the middle."""
    mid = (num_frames - 1) / 2
    half_sq = 0.85 * 11.0
    r = 5.0
    rel_speed = 2 * (half_sq - r) / occluded_frames
    v = rel_speed / 2
    sq = ObjectSpec(cls=1, size=11.0, color=(0.95, 0.75, 0.15), start=(32 - v * mid, 32.0),
                    velocity=(v, 0.0), z=1)
    disc = ObjectSpec(cls=0, size=r, color=(0.2, 0.6, 1.0), start=(32 + v * mid, 32.0),
                      velocity=(-v, 0.0), z=0)
    return VideoSpec(num_frames, [sq, disc])


def generate_video_set(cfg: DatasetConfig) -> list[Video]:
    cfg.validate()
    root = np.random.default_rng(cfg.seed)
    videos = []
    for split, count in (("train", cfg.num_train), ("val", cfg.num_val)):
        for k in range(count):
            vid_seed = int(root.integers(0, 2 ** 31 - 1))
            vrng = np.random.default_rng(vid_seed)
            for _attempt in range(100):
                spec = random_video_spec(vrng, cfg.num_frames, cfg.height, cfg.width,
                                         cfg.min_objects, cfg.max_objects, cfg.occlusion_prob)
                try:
                    videos.append(generate_video(spec, vid_seed, f"{split}{k:03d}", split))
                    break
                except GenerationError:
                    continue
            else:
                raise GenerationError(f"could not generate a valid {split} video {k}")
    return videos


# -- training clips -------------------------------------------------------------------

def sample_clip_indices(num_frames: int, clip_len: int, range_r: int,
                        rng: np.random.Generator, ref: int | None = None) -> np.ndarray:
    if num_frames < clip_len:
        raise ValueError(f"video has {num_frames} frames, clip needs {clip_len}")
    if ref is None:
        ref = int(rng.integers(0, num_frames))
    lo, hi = max(0, ref - range_r), min(num_frames - 1, ref + range_r)
    while hi - lo + 1 < clip_len:
        lo, hi = max(0, lo - 1), min(num_frames - 1, hi + 1)
    pool = np.array([i for i in range(lo, hi + 1) if i != ref], dtype=int)
    companions = rng.choice(pool, size=clip_len - 1, replace=False) if clip_len > 1 else []
    return np.sort(np.concatenate([[ref], companions]).astype(int))


def sample_training_clip(video: Video, clip_len: int, range_r: int = 5, seed=None,
                         reverse_prob: float = 0.5, flip_prob: float = 0.5) -> ClipBatch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = sample_clip_indices(video.num_frames, clip_len, range_r, rng)
    rev = bool(rng.uniform() < reverse_prob)
    flip = bool(rng.uniform() < flip_prob)
    if rev:
        idx = idx[::-1].copy()
    frames = video.frames[idx]
    masks = video.masks[:, idx]
    if flip:
        frames = frames[:, :, ::-1]
        masks = masks[..., ::-1]
    visible = masks.reshape(len(masks), -1).any(axis=1)
    gt = ClipGroundTruth(video.classes[visible], np.ascontiguousarray(masks[visible]),
                         video.ids[visible])
    return ClipBatch(prepare_frames(np.ascontiguousarray(frames)), gt, idx, rev, flip)


# -- dataset files ----------------------------------------------------------------------

@dataclass
class Dataset:
    videos: list
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Video]:
        return [v for v in self.videos if v.split == name]

    def by_id(self) -> dict:
        return {v.video_id: v for v in self.videos}


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"missing frame file {p}")
    raw = p.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{p}: truncated PPM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DatasetError(f"{p}: expected binary P6 with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    data = raw[pos + 1:]
    if len(data) != w * h * 3:
        raise DatasetError(f"{p}: pixel payload has {len(data)} bytes, expected {w * h * 3}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def save_dataset(path, dataset: Dataset) -> None:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.videos:
        fdir = root / "frames" / v.video_id
        mdir = root / "masks" / v.video_id
        fdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        frame_paths = []
        for t in range(v.num_frames):
            rel = f"frames/{v.video_id}/{t:04d}.ppm"
            write_ppm(root / rel, v.frames[t])
            frame_paths.append(rel)
        objects = []
        for i in range(len(v.classes)):
            rel = f"masks/{v.video_id}/{int(v.ids[i])}.rle"
            rle.write(root / rel, v.masks[i])
            objects.append({"id": int(v.ids[i]), "class": int(v.classes[i]),
                            "class_name": CLASS_NAMES[int(v.classes[i])], "mask": rel})
        entries.append({"id": v.video_id, "split": v.split, "num_frames": v.num_frames,
                        "frames": frame_paths, "objects": objects})
    h, w = (dataset.videos[0].frames.shape[1:3] if dataset.videos else (64, 64))
    manifest = {"format": "novis-synth-v1", "height": int(h), "width": int(w),
                "num_classes": len(CLASS_NAMES), "classes": list(CLASS_NAMES),
                "meta": dataset.meta, "videos": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: malformed JSON at line {exc.lineno} col {exc.colno}") from exc
    try:
        h, w = int(manifest["height"]), int(manifest["width"])
        videos = []
        for vi, entry in enumerate(manifest["videos"]):
            where = f"{mpath}: videos[{vi}] ({entry.get('id', '?')})"
            if len(entry["frames"]) != entry["num_frames"]:
                raise DatasetError(f"{where}: frame list length != num_frames")
            frames = np.stack([read_ppm(root / rel) for rel in entry["frames"]]) if entry["frames"] \
                else np.zeros((0, h, w, 3), np.uint8)
            shape = (entry["num_frames"], h, w)
            masks, classes, ids = [], [], []
            for obj in entry["objects"]:
                name = f"video {entry['id']} object {obj['id']}"
                masks.append(rle.read(root / obj["mask"], shape, name))
                classes.append(int(obj["class"]))
                ids.append(int(obj["id"]))
            masks = np.stack(masks) if masks else np.zeros((0,) + shape, bool)
            videos.append(Video(entry["id"], frames, masks, np.array(classes, dtype=int),
                                np.array(ids, dtype=int), entry.get("split", "train")))
    except KeyError as exc:
        raise DatasetError(f"{mpath}: missing key {exc}") from exc
    return Dataset(videos, manifest.get("meta", {}))
