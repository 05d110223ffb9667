"""Training loop: clip sampling, deep-supervised clip loss, AdamW with two LR drops."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossWeights, clip_loss
from .model import ModelConfig, NovisModel
from .synth import Video, sample_training_clip


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_drops: tuple = (0.6, 0.85)
    lr_drop_factor: float = 0.1
    grad_clip: float = 1.0
    clip_len: int = 4
    sample_range: int = 5
    reverse_prob: float = 0.5
    flip_prob: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for frac in self.lr_drops:
            if step >= int(round(frac * self.steps)):
                lr *= self.lr_drop_factor
        return lr


class AdamW:
    """Adam with decoupled weight decay; decay skips biases, norms and embeddings."""

    NO_DECAY = ("temporal", "level_embed", "query_feat", "query_pos")

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def _decays(self, name: str, value) -> bool:
        return value.ndim >= 2 and name not in self.NO_DECAY

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self._decays(k, p.data):
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in params.values() if p.grad is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def train_step(model: NovisModel, batch: list, weights: LossWeights):
    """Forward/backward over a list of ClipBatch; returns the mean breakdown."""
    total = None
    agg = {"total": 0.0, "class": 0.0, "mask": 0.0, "dice": 0.0}
    for clip in batch:
        out = model(clip.frames)
        hm, wm = out.mask_logits.shape[-2:]
        loss, parts, _ = clip_loss(out, clip.gt.downsample(hm, wm), weights)
        total = loss if total is None else total + loss
        for k in agg:
            agg[k] += parts[k] / len(batch)
    (total * (1.0 / len(batch))).backward()
    return agg


def train(videos: list[Video], model_cfg: ModelConfig, cfg: TrainConfig,
          log_path=None, progress=None) -> NovisModel:
    """Train from scratch; every step appends one JSON line to ``log_path``."""
    model = NovisModel(model_cfg)
    opt = AdamW(model.params, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    usable = [v for v in videos if v.num_frames >= cfg.clip_len]
    if not usable:
        raise ValueError(f"no training video has at least {cfg.clip_len} frames")
    log = open(log_path, "w") if log_path else None
    t0 = time.time()
    try:
        for step in range(cfg.steps):
            batch = []
            for _ in range(cfg.batch_size):
                vid = usable[int(rng.integers(0, len(usable)))]
                batch.append(sample_training_clip(vid, cfg.clip_len, cfg.sample_range, rng,
                                                  cfg.reverse_prob, cfg.flip_prob))
            opt.zero_grad()
            parts = train_step(model, batch, cfg.weights)
            gnorm = clip_grad_norm(model.params, cfg.grad_clip)
            lr = cfg.lr_at(step)
            opt.step(lr)
            record = {"step": step, **{k: round(v, 6) for k, v in parts.items()},
                      "lr": lr, "grad_norm": round(gnorm, 6)}
            if log:
                log.write(json.dumps(record) + "\n")
            if progress and (step % progress == 0 or step == cfg.steps - 1):
                print(f"step {step:5d} loss {parts['total']:.4f} "
                      f"(cls {parts['class']:.3f} mask {parts['mask']:.3f} dice {parts['dice']:.3f}) "
                      f"lr {lr:.1e} {time.time() - t0:.0f}s", flush=True)
    finally:
        if log:
            log.close()
    return model


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    d["lr_drops"] = list(cfg.lr_drops)
    return d
