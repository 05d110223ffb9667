"""Near-online inference: sliding clips, inter-clip identity matching, mask averaging.

Also hosts the two baselines (pure online and online with a track buffer)
and the on-disk format for predicted tracks.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rle
from . import tensor as nt
from .assignment import linear_assignment
from .model import DecoderOutput, NovisModel, prepare_frames
from .tensor import ContractViolation

MODES = ("embedding", "overlap_embedding", "heuristic")


@dataclass
class ClipWindow:
    start: int
    length: int
    overlap_prev: tuple = ()          # absolute frames shared with the previous window

    @property
    def frames(self) -> range:
        return range(self.start, self.start + self.length)


@dataclass
class ClipInstances:
    frames: np.ndarray                # absolute frame indices covered by the clip
    query_idx: np.ndarray             # [k]
    class_probs: np.ndarray           # [k, K+1]
    scores: np.ndarray                # [k], descending
    masks: np.ndarray                 # [k, T, H, W] probabilities at frame resolution
    embeddings: np.ndarray            # [k, C]
    start_overlap: tuple | None = None  # (embeddings [k, C], fallback [k]) on frames shared with the previous clip
    end_overlap: tuple | None = None    # same, for frames shared with the next clip
    track_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.query_idx)

    def take(self, order) -> "ClipInstances":
        order = np.asarray(order, dtype=int)
        pick = lambda ov: None if ov is None else (ov[0][order], ov[1][order])
        return ClipInstances(self.frames, self.query_idx[order], self.class_probs[order],
                             self.scores[order], self.masks[order], self.embeddings[order],
                             pick(self.start_overlap), pick(self.end_overlap),
                             None if self.track_ids is None else self.track_ids[order])


@dataclass
class Track:
    track_id: int
    label: int
    score: float
    masks: np.ndarray                 # bool [num_frames, H, W]


@dataclass
class _Accum:
    prob_sum: np.ndarray
    counts: np.ndarray
    score_sum: float = 0.0
    n_clips: int = 0
    class_mass: np.ndarray | None = None


@dataclass
class TrackSet:
    num_frames: int
    height: int
    width: int
    tracks: dict = field(default_factory=dict)   # id -> _Accum
    next_id: int = 0

    def new_id(self) -> int:
        tid = self.next_id
        self.next_id += 1
        return tid

    def finalize(self) -> list[Track]:
        out = []
        for tid in sorted(self.tracks):
            acc = self.tracks[tid]
            cnt = acc.counts[:, None, None]
            avg = np.divide(acc.prob_sum, cnt, out=np.zeros_like(acc.prob_sum), where=cnt > 0)
            label = int(np.argmax(acc.class_mass))
            out.append(Track(tid, label, acc.score_sum / acc.n_clips, avg > 0.5))
        return out


# -- scheduling ----------------------------------------------------------------------

def schedule_clips(num_frames: int, clip_len: int, stride: int) -> list[ClipWindow]:
    if not 1 <= stride <= clip_len:
        raise ContractViolation(f"stride must satisfy 1 <= S <= T, got S={stride}, T={clip_len}")
    if num_frames < 1:
        raise ContractViolation("video must have at least one frame")
    if num_frames <= clip_len:
        return [ClipWindow(0, num_frames)]
    last = num_frames - clip_len
    starts = list(range(0, last + 1, stride))
    if starts[-1] != last:
        starts.append(last)
    windows = []
    for i, s in enumerate(starts):
        shared = ()
        if i:
            prev_end = starts[i - 1] + clip_len
            shared = tuple(range(s, min(prev_end, s + clip_len)))
        windows.append(ClipWindow(s, clip_len, shared))
    return windows


# -- per-clip selection ------------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def select_instances(out: DecoderOutput, top_k: int, frame_size: tuple | None = None,
                     frames: Sequence[int] | None = None) -> ClipInstances:
    """Keep the ``top_k`` queries by max foreground class probability."""
    logits = np.asarray(out.class_logits.data, dtype=np.float64)
    n = logits.shape[0]
    if top_k > n:
        raise ContractViolation(f"top_k={top_k} exceeds {n} queries")
    probs = _softmax(logits)
    scores = probs[:, :-1].max(axis=1)
    order = np.argsort(-scores, kind="stable")[:top_k]
    ml = out.mask_logits.data[order]
    prob = 1.0 / (1.0 + np.exp(-ml.astype(np.float64)))
    if frame_size is not None and tuple(frame_size) != prob.shape[-2:]:
        prob = nt.resize_array(prob, *frame_size)
    t = ml.shape[1]
    frames = np.arange(t) if frames is None else np.asarray(frames, dtype=int)
    emb = np.asarray(out.output_embeddings.data, dtype=np.float64)[order]
    inst = ClipInstances(frames, order, probs[order], scores[order], prob, emb)
    return inst


def attach_overlaps(inst: ClipInstances, start: tuple | None, end: tuple | None) -> ClipInstances:
    q = inst.query_idx
    if start is not None:
        inst.start_overlap = (np.asarray(start[0], np.float64)[q], np.asarray(start[1])[q])
    if end is not None:
        inst.end_overlap = (np.asarray(end[0], np.float64)[q], np.asarray(end[1])[q])
    return inst


# -- matching -------------------------------------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dots = a @ b.T
    denom = na[:, None] * nb[None, :]
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def _shared_local(prev: ClipInstances, nxt: ClipInstances):
    shared = np.intersect1d(prev.frames, nxt.frames)
    pi = np.searchsorted(prev.frames, shared) if np.all(np.diff(prev.frames) > 0) else \
        np.array([np.flatnonzero(prev.frames == f)[0] for f in shared], dtype=int)
    ni = np.array([np.flatnonzero(nxt.frames == f)[0] for f in shared], dtype=int)
    return shared, pi, ni


def similarity_matrix(prev: ClipInstances, nxt: ClipInstances, mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ContractViolation(f"unknown matching mode {mode!r}")
    shared, pi, ni = _shared_local(prev, nxt)
    if mode == "embedding" or shared.size == 0:
        return cosine_similarity(prev.embeddings, nxt.embeddings)
    if mode == "overlap_embedding":
        if prev.end_overlap is None or nxt.start_overlap is None:
            raise ContractViolation("overlap_embedding matching needs overlap embeddings on both clips")
        pe, pf = prev.end_overlap
        ne, nf = nxt.start_overlap
        sim_ov = cosine_similarity(pe, ne)
        sim_full = cosine_similarity(prev.embeddings, nxt.embeddings)
        either = pf[:, None] | nf[None, :]
        return np.where(either, sim_full, sim_ov)
    # heuristic: volumetric IoU on shared frames plus a class-agreement bonus
    a = (prev.masks[:, pi] > 0.5).reshape(len(prev), -1).astype(np.float64)
    b = (nxt.masks[:, ni] > 0.5).reshape(len(nxt), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    ca = prev.class_probs[:, :-1].argmax(axis=1)
    cb = nxt.class_probs[:, :-1].argmax(axis=1)
    return iou + (ca[:, None] == cb[None, :]).astype(np.float64)


def match_similarity(sim: np.ndarray, threshold: float | None = None) -> list[tuple[int, int]]:
    if sim.size == 0:
        return []
    rows, cols = linear_assignment(-sim)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    if threshold is not None:
        pairs = [(r, c) for r, c in pairs if sim[r, c] >= threshold]
    return pairs


def match_clips(prev: ClipInstances, nxt: ClipInstances, mode: str = "embedding",
                threshold: float | None = None) -> list[tuple[int, int]]:
    """One-to-one maximum-similarity pairs ``(prev_index, next_index)``."""
    return match_similarity(similarity_matrix(prev, nxt, mode), threshold)


def assign_ids(track_set: TrackSet, prev: ClipInstances | None, nxt: ClipInstances,
               pairs: list[tuple[int, int]]) -> None:
    ids = np.full(len(nxt), -1, dtype=int)
    for i, j in pairs:
        ids[j] = prev.track_ids[i]
    for j in range(len(nxt)):
        if ids[j] < 0:
            ids[j] = track_set.new_id()
    nxt.track_ids = ids


def merge_masks(track_set: TrackSet, instances: ClipInstances) -> TrackSet:
    """Accumulate each instance's per-frame probabilities into its track."""
    for j, tid in enumerate(instances.track_ids):
        tid = int(tid)
        acc = track_set.tracks.get(tid)
        if acc is None:
            acc = _Accum(np.zeros((track_set.num_frames, track_set.height, track_set.width)),
                         np.zeros(track_set.num_frames, dtype=int),
                         class_mass=np.zeros(instances.class_probs.shape[1] - 1))
            track_set.tracks[tid] = acc
        acc.prob_sum[instances.frames] += instances.masks[j]
        acc.counts[instances.frames] += 1
        acc.score_sum += float(instances.scores[j])
        acc.n_clips += 1
        acc.class_mass += instances.class_probs[j, :-1]
    return track_set


# -- pipelines ---------------------------------------------------------------------------------

@dataclass
class TrackerConfig:
    clip_len: int = 4
    stride: int = 2
    top_k: int = 10
    mode: str = "overlap_embedding"
    match_all: bool = False
    threshold: float | None = None


def _decode(model: NovisModel, frames: np.ndarray) -> DecoderOutput:
    with nt.no_grad():
        return model(frames)


def run_near_online(video: np.ndarray, model: NovisModel, clip_len: int = 4, stride: int = 2,
                    top_k: int = 10, mode: str = "overlap_embedding", match_all: bool = False,
                    threshold: float | None = None) -> TrackSet:
    """Track instances through ``video`` (uint8 ``[𝒯, H, W, 3]``) clip by clip."""
    if mode not in MODES:
        raise ContractViolation(f"unknown matching mode {mode!r}")
    video = np.asarray(video)
    n_frames, h, w = video.shape[:3]
    x = prepare_frames(video)
    windows = schedule_clips(n_frames, clip_len, stride)
    keep = model.config.num_queries if match_all else top_k
    ts = TrackSet(n_frames, h, w)
    prev = None
    for wi, win in enumerate(windows):
        out = _decode(model, x[win.start:win.start + win.length])
        inst = select_instances(out, keep, (h, w), list(win.frames))
        if mode == "overlap_embedding":
            start = end = None
            if wi > 0 and win.overlap_prev:
                start = model.overlap_embeddings(out, [f - win.start for f in win.overlap_prev])
            if wi + 1 < len(windows) and windows[wi + 1].overlap_prev:
                end = model.overlap_embeddings(
                    out, [f - win.start for f in windows[wi + 1].overlap_prev])
            attach_overlaps(inst, start, end)
        if prev is None:
            assign_ids(ts, None, inst, [])
        else:
            by_id = prev.take(np.argsort(prev.track_ids, kind="stable"))
            assign_ids(ts, by_id, inst, match_clips(by_id, inst, mode, threshold))
        merge_masks(ts, inst)
        prev = inst
    if match_all:
        _prune(ts, top_k)
    return ts


def run_online_buffer(video: np.ndarray, model: NovisModel, buffer: int = 1, top_k: int = 10,
                      threshold: float | None = None) -> TrackSet:
    """Frame-by-frame tracking against the mean of each track's last ``buffer`` embeddings."""
    if buffer < 1:
        raise ContractViolation(f"buffer length must be >= 1, got {buffer}")
    video = np.asarray(video)
    n_frames, h, w = video.shape[:3]
    x = prepare_frames(video)
    ts = TrackSet(n_frames, h, w)
    memory: dict[int, deque] = {}
    for t in range(n_frames):
        out = _decode(model, x[t:t + 1])
        inst = select_instances(out, top_k, (h, w), [t])
        tids = sorted(memory)
        if tids:
            means = np.stack([np.mean(np.stack(memory[tid]), axis=0) for tid in tids])
            sim = cosine_similarity(means, inst.embeddings)
            pairs = match_similarity(sim, threshold)
            ids = np.full(len(inst), -1, dtype=int)
            for i, j in pairs:
                ids[j] = tids[i]
            for j in range(len(inst)):
                if ids[j] < 0:
                    ids[j] = ts.new_id()
            inst.track_ids = ids
        else:
            assign_ids(ts, None, inst, [])
        for j, tid in enumerate(inst.track_ids):
            memory.setdefault(int(tid), deque(maxlen=buffer)).append(inst.embeddings[j])
        merge_masks(ts, inst)
    return ts


def _prune(ts: TrackSet, top_k: int) -> None:
    ranked = sorted(ts.tracks, key=lambda tid: (-ts.tracks[tid].score_sum / ts.tracks[tid].n_clips, tid))
    for tid in ranked[top_k:]:
        del ts.tracks[tid]


def run_tracker(video: np.ndarray, model: NovisModel, mode: str, clip_len: int = 4,
                stride: int = 2, top_k: int = 10, **kw) -> TrackSet:
    """Dispatch the CLI mode strings: embedding, overlap, heuristic, online, online_buffer:B."""
    if mode == "online":
        return run_near_online(video, model, 1, 1, top_k, "embedding", **kw)
    if mode.startswith("online_buffer"):
        _, _, b = mode.partition(":")
        return run_online_buffer(video, model, int(b or 1), top_k, kw.get("threshold"))
    mode = {"overlap": "overlap_embedding"}.get(mode, mode)
    return run_near_online(video, model, clip_len, stride, top_k, mode, **kw)


def parse_mode(mode: str) -> str:
    if mode in ("embedding", "overlap", "overlap_embedding", "heuristic", "online"):
        return mode
    if mode.startswith("online_buffer:"):
        b = mode.split(":", 1)[1]
        if b.isdigit() and int(b) >= 1:
            return mode
    raise ValueError(f"invalid mode {mode!r}; expected embedding, overlap, heuristic, online "
                     f"or online_buffer:B")


# -- serialization ---------------------------------------------------------------------------

def save_tracks(out_dir, results: dict) -> None:
    """``results``: video id -> (num_frames, H, W, list[Track])."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    videos = []
    for vid in sorted(results):
        n_frames, h, w, tracks = results[vid]
        (root / "masks" / vid).mkdir(parents=True, exist_ok=True)
        entries = []
        for tr in tracks:
            rel = f"masks/{vid}/{tr.track_id}.rle"
            rle.write(root / rel, tr.masks)
            entries.append({"id": int(tr.track_id), "class": int(tr.label),
                            "score": float(tr.score), "mask": rel})
        videos.append({"id": vid, "num_frames": int(n_frames), "height": int(h),
                       "width": int(w), "tracks": entries})
    manifest = {"format": "novis-tracks-v1", "videos": videos}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_tracks(out_dir) -> dict:
    root = Path(out_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        return {}
    manifest = json.loads(mpath.read_text())
    results = {}
    for v in manifest["videos"]:
        shape = (v["num_frames"], v["height"], v["width"])
        tracks = [Track(int(t["id"]), int(t["class"]), float(t["score"]),
                        rle.read(root / t["mask"], shape, f"video {v['id']} track {t['id']}"))
                  for t in v["tracks"]]
        results[v["id"]] = (*shape, tracks)
    return results
