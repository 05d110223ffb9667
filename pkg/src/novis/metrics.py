"""Video instance segmentation metrics with volumetric IoU (COCO-style AP/AR)."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .assignment import linear_assignment
from .tensor import ContractViolation

THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    AR1: float
    AR10: float
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    CSV_FIELDS = ("AP", "AP50", "AP75", "AR1", "AR10")

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, k):.6f}" for k in self.CSV_FIELDS)


def volumetric_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractViolation(f"mask volumes differ in extent: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(preds: list, gts: list) -> np.ndarray:
    """Pairwise volumetric IoU ``[P, G]`` via one matrix product over flattened volumes."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    a = np.stack([np.asarray(t.masks, bool).ravel() for t in preds]).astype(np.float64)
    b = np.stack([np.asarray(t.masks, bool).ravel() for t in gts]).astype(np.float64)
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("prediction and ground-truth volumes differ in extent")
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def identity_ious(tracks: list, gt_masks) -> np.ndarray:
    """Per ground-truth object, the volumetric IoU of its one-to-one matched track.

    Tracks are assigned to objects by maximum total IoU, so one track cannot
    stand in for two identities. Unmatched objects get 0.
    """
    gts = [_Vol(m) for m in gt_masks]
    out = np.zeros(len(gts))
    if not tracks or not gts:
        return out
    iou = iou_matrix(tracks, gts)
    rows, cols = linear_assignment(-iou)
    out[cols] = iou[rows, cols]
    return out


@dataclass
class _Vol:
    masks: np.ndarray


def _video_matches(scores, track_ids, ious, thr):
    """Greedy by descending score (ties by track id): each prediction takes the
    unmatched GT with highest IoU >= thr. Returns per-prediction TP flags in score order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], track_ids[i]))
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = []
    for i in order:
        best, best_iou = -1, thr
        for g in range(ious.shape[1]):
            if not taken[g] and ious[i, g] >= best_iou and (best < 0 or ious[i, g] > ious[i, best]):
                best, best_iou = g, ious[i, g]
        if best >= 0:
            taken[best] = True
        tp.append(best >= 0)
    return [(scores[i], track_ids[i], t) for i, t in zip(order, tp)]


def _interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> tuple[float, float]:
    if tp_flags.size == 0:
        return 0.0, 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    rc = tp / n_gt
    pr = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return float(q.mean()), float(rc[-1])


def evaluate_ap(preds: dict, gts: dict, thresholds=THRESHOLDS, num_classes: int = 3,
                max_dets: int = 100) -> EvalReport:
    """Evaluate predicted tracks against ground truth over a set of videos.

    ``preds`` and ``gts`` map video id to a list of tracks with ``label``,
    ``score`` (predictions only), ``track_id`` and ``masks``. Per class and
    threshold the 101-point interpolated AP is computed over all videos;
    classes without ground truth are excluded from the means. AR@k keeps the
    k highest-scored predictions of each class in each video.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    videos = sorted(set(gts) | set(preds))
    ious = {}
    for vid in videos:
        p = preds.get(vid, [])
        g = gts.get(vid, [])
        ious[vid] = iou_matrix(p, g)

    ap = np.full((len(thresholds), num_classes), np.nan)
    ar = {1: np.full_like(ap, np.nan), 10: np.full_like(ap, np.nan)}
    for c in range(num_classes):
        n_gt = sum(sum(1 for t in gts.get(v, []) if t.label == c) for v in videos)
        if n_gt == 0:
            continue
        for ti, thr in enumerate(thresholds):
            for cap, store in ((max_dets, None), (1, ar[1]), (10, ar[10])):
                records = []
                for vid in videos:
                    p = preds.get(vid, [])
                    g = gts.get(vid, [])
                    pi = [i for i, t in enumerate(p) if t.label == c]
                    gi = [i for i, t in enumerate(g) if t.label == c]
                    if not pi:
                        continue
                    pi = sorted(pi, key=lambda i: (-p[i].score, p[i].track_id))[:cap]
                    sub = ious[vid][np.ix_(pi, gi)] if gi else np.zeros((len(pi), 0))
                    records += _video_matches([p[i].score for i in pi],
                                              [(vid, p[i].track_id) for i in pi], sub, thr)
                records.sort(key=lambda r: (-r[0], r[1]))
                flags = np.array([r[2] for r in records], dtype=bool)
                a, rec = _interpolated_ap(flags, n_gt)
                if store is None:
                    ap[ti, c] = a
                else:
                    store[ti, c] = rec

    def mean(x):
        return float(np.nanmean(x)) if np.any(~np.isnan(x)) else 0.0

    def at(thr):
        hit = np.flatnonzero(np.isclose(thresholds, thr))
        return mean(ap[hit[0]]) if hit.size else float("nan")

    per_class = {}
    for c in range(num_classes):
        if not np.all(np.isnan(ap[:, c])):
            per_class[str(c)] = {"AP": mean(ap[:, c]), "AR1": mean(ar[1][:, c]),
                                 "AR10": mean(ar[10][:, c])}
    return EvalReport(mean(ap), at(0.5), at(0.75), mean(ar[1]), mean(ar[10]), per_class)


def ap_bruteforce_oracle(preds: list, gts: list, threshold: float) -> float:
    """Reference AP for one video and one class, by exhaustive enumeration.

    Every injective partial matching of predictions to ground truth is
    enumerated; the one consistent with the greedy-by-score rule is kept, and
    the interpolated precision at each of the 101 recall levels is computed
    from its definition ``max{precision_i : recall_i >= r}``.
    """
    if len(preds) > 4 or len(gts) > 3:
        raise ContractViolation("oracle is limited to 4 predictions and 3 ground-truth tracks")
    if not gts:
        raise ContractViolation("oracle needs at least one ground-truth track")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].track_id))
    iou = [[volumetric_iou(preds[i].masks, g.masks) for g in gts] for i in order]
    options = [None] + list(range(len(gts)))
    consistent = None
    for choice in itertools.product(options, repeat=len(order)):
        used = [c for c in choice if c is not None]
        if len(set(used)) != len(used):
            continue
        ok = True
        for k, c in enumerate(choice):
            free = [g for g in range(len(gts)) if g not in choice[:k]]
            eligible = [g for g in free if iou[k][g] >= threshold]
            if not eligible:
                ok = c is None
            else:
                best = max(iou[k][g] for g in eligible)
                first_best = min(g for g in eligible if iou[k][g] == best)
                ok = c == first_best
            if not ok:
                break
        if ok:
            consistent = choice
            break
    precisions, recalls = [], []
    hits = 0
    for k, c in enumerate(consistent or ()):
        hits += c is not None
        precisions.append(hits / (k + 1))
        recalls.append(hits / len(gts))
    total = 0.0
    for r in RECALL_POINTS:
        reach = [p for p, rc in zip(precisions, recalls) if rc >= r]
        total += max(reach) if reach else 0.0
    return total / len(RECALL_POINTS)
