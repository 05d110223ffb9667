"""Clip-level matching and training objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as nt
from .assignment import linear_assignment
from .tensor import ContractViolation, Tensor


@dataclass
class LossWeights:
    cls: float = 2.0
    mask: float = 5.0
    dice: float = 5.0
    background: float = 0.1
    dice_eps: float = 1.0


@dataclass
class ClipGroundTruth:
    """Objects visible in at least one clip frame.

    ``masks`` is bool ``[G, T, H, W]``; occluded frames stay as all-zero planes.
    """
    classes: np.ndarray
    masks: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=int).reshape(-1)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.ids is None:
            self.ids = np.arange(len(self.classes))
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1)
        if self.masks.ndim != 4 or len(self.masks) != len(self.classes):
            raise ContractViolation(
                f"masks {self.masks.shape} do not match {len(self.classes)} objects")

    def __len__(self) -> int:
        return len(self.classes)

    def subset(self, keep) -> "ClipGroundTruth":
        keep = np.asarray(keep)
        return ClipGroundTruth(self.classes[keep], self.masks[keep], self.ids[keep])

    def downsample(self, h: int, w: int) -> "ClipGroundTruth":
        return ClipGroundTruth(self.classes, downsample_masks(self.masks, h, w), self.ids)


@dataclass
class Assignment:
    """``query_of_gt[i]`` is the query matched to ground-truth object ``i``."""
    query_of_gt: np.ndarray
    num_queries: int

    def __post_init__(self):
        self.query_of_gt = np.asarray(self.query_of_gt, dtype=int).reshape(-1)
        if len(set(self.query_of_gt.tolist())) != len(self.query_of_gt):
            raise ContractViolation("assignment is not injective")


def downsample_masks(masks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-majority downsampling of ``[..., H, W]`` binary masks (ties count as foreground)."""
    masks = np.asarray(masks, dtype=bool)
    hh, ww = masks.shape[-2:]
    if (hh, ww) == (h, w):
        return masks.copy()
    if hh % h or ww % w:
        raise ContractViolation(f"cannot area-downsample {hh}x{ww} to {h}x{w}")
    fh, fw = hh // h, ww // w
    blocks = masks.reshape(*masks.shape[:-2], h, fh, w, fw)
    return blocks.sum(axis=(-3, -1)) * 2 >= fh * fw


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def matching_cost(class_logits, mask_logits, gt: ClipGroundTruth,
                  weights: LossWeights = LossWeights()) -> np.ndarray:
    """Cost matrix ``[N, G]`` between queries and ground-truth objects."""
    cl = np.asarray(getattr(class_logits, "data", class_logits), dtype=np.float64)
    ml = np.asarray(getattr(mask_logits, "data", mask_logits), dtype=np.float64)
    n = cl.shape[0]
    x = ml.reshape(n, -1)
    g = gt.masks.reshape(len(gt), -1).astype(np.float64)
    if g.shape[1] != x.shape[1]:
        raise ContractViolation(f"gt masks {gt.masks.shape[1:]} differ from mask logits {ml.shape[1:]}")
    prob = _softmax_np(cl)
    cost_cls = -prob[:, gt.classes]
    softplus = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    # mean over frames of per-frame mean BCE == mean over the volume (equal frame sizes)
    cost_mask = (softplus.sum(axis=1)[:, None] - x @ g.T) / x.shape[1]
    p = 1.0 / (1.0 + np.exp(-x))
    cost_dice = 1.0 - 2.0 * (p @ g.T) / (p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :]
                                         + weights.dice_eps)
    return weights.cls * cost_cls + weights.mask * cost_mask + weights.dice * cost_dice


def hungarian_match(class_logits, mask_logits, gt: ClipGroundTruth,
                    weights: LossWeights = LossWeights()) -> Assignment:
    n = np.shape(getattr(class_logits, "data", class_logits))[0]
    if len(gt) > n:
        raise ContractViolation(f"{len(gt)} ground-truth objects exceed {n} queries")
    if len(gt) == 0:
        return Assignment(np.zeros(0, dtype=int), n)
    cost = matching_cost(class_logits, mask_logits, gt, weights)
    rows, cols = linear_assignment(cost.T)
    return Assignment(cols, n)


def class_loss(class_logits: Tensor, assignment: Assignment, gt: ClipGroundTruth,
               background_weight: float = 0.1) -> Tensor:
    """Weighted-mean cross-entropy over all queries; unmatched queries target background."""
    n, k1 = class_logits.shape
    targets = np.full(n, k1 - 1, dtype=int)
    targets[assignment.query_of_gt] = gt.classes
    w = np.where(targets == k1 - 1, background_weight, 1.0).astype(class_logits.dtype)
    logp = nt.log_softmax(class_logits, axis=-1)
    nll = -logp[np.arange(n), targets]
    return (nll * w).sum() * (1.0 / float(w.sum()))


def frame_mask_loss(mask_logits: Tensor, assignment: Assignment, gt: ClipGroundTruth) -> Tensor:
    """Per-frame mean BCE, averaged over frames and then over matched queries."""
    if len(assignment.query_of_gt) == 0:
        return Tensor(0.0, dtype=mask_logits.dtype)
    sel = mask_logits[assignment.query_of_gt]
    bce = nt.bce_with_logits(sel, gt.masks.astype(mask_logits.dtype))
    per_frame = bce.mean(axis=(2, 3))
    return per_frame.mean()


def volumetric_dice_loss(mask_logits: Tensor, assignment: Assignment, gt: ClipGroundTruth,
                         eps: float = 1.0) -> Tensor:
    """One dice loss per matched query over its whole ``T x H x W`` volume."""
    g = len(assignment.query_of_gt)
    if g == 0:
        return Tensor(0.0, dtype=mask_logits.dtype)
    p = nt.sigmoid(mask_logits[assignment.query_of_gt]).reshape(g, -1)
    tgt = gt.masks.reshape(g, -1).astype(mask_logits.dtype)
    num = (p * tgt).sum(axis=1) * 2.0
    den = p.sum(axis=1) + (tgt.sum(axis=1) + eps)
    return (1.0 - num / den).mean()


def clip_loss(output, gt: ClipGroundTruth, weights: LossWeights = LossWeights(),
              assignments: list | None = None):
    """Deep-supervised clip loss over every decoder layer's prediction.

    ``gt`` must already be at mask-logit resolution. Returns
    ``(total, breakdown, assignments)``; the breakdown holds the weighted
    class/mask/dice contributions summed over layers.
    """
    total = None
    parts = {"class": 0.0, "mask": 0.0, "dice": 0.0}
    used = []
    for i, (cls, masks) in enumerate(output.layer_predictions):
        a = assignments[i] if assignments is not None else hungarian_match(cls, masks, gt, weights)
        used.append(a)
        lc = class_loss(cls, a, gt, weights.background) * weights.cls
        lm = frame_mask_loss(masks, a, gt) * weights.mask
        ld = volumetric_dice_loss(masks, a, gt, weights.dice_eps) * weights.dice
        layer_total = lc + lm + ld
        total = layer_total if total is None else total + layer_total
        parts["class"] += lc.item()
        parts["mask"] += lm.item()
        parts["dice"] += ld.item()
    parts["total"] = total.item()
    return total, parts, used
