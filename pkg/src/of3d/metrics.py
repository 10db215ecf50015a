"""Evaluation: mIoU, multi-threshold instance AP, panoptic quality, box AP.

All metrics are pure functions of label arrays / mask lists and work at
whatever granularity the caller supplies (the CLI evaluates at point level
after unpooling predictions). Score ties break by ascending prediction
index; unlabeled ground truth (-1) is excluded from every denominator.

AP integrates the precision envelope over all recall points. This is
self-consistent across ablations but intentionally simpler than benchmark
servers' protocols, so numbers are not comparable to leaderboard scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .scene import ClassCatalog

MAP_THRESHOLDS = tuple(np.arange(50, 100, 5) / 100.0)  # 0.50 .. 0.95


def miou(pred_sem: np.ndarray, gt_sem: np.ndarray, catalog: ClassCatalog):
    """Per-class IoU over classes present in the ground truth, plus the mean.

    Points with ground truth -1 are ignored entirely.
    """
    pred = np.asarray(pred_sem, dtype=np.int64)
    gt = np.asarray(gt_sem, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"label shapes disagree: {pred.shape} vs {gt.shape}")
    keep = gt >= 0
    pred, gt = pred[keep], gt[keep]
    per_class = {}
    for c in np.unique(gt):
        p, g = pred == c, gt == c
        union = np.logical_or(p, g).sum()
        per_class[int(c)] = float(np.logical_and(p, g).sum() / union) if union else 0.0
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def _greedy_pr(preds, gts, iou_fn, threshold):
    """Greedy matching by descending score; returns TP flags and #GT."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    matched = [False] * len(gts)
    tp = []
    for i in order:
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            v = iou_fn(preds[i], gt)
            if v > best_iou:
                best_iou, best_g = v, g
        if best_g >= 0 and best_iou >= threshold:
            matched[best_g] = True
            tp.append(True)
        else:
            tp.append(False)
    return np.array(tp, dtype=bool), len(gts)


def _envelope_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope of the cumulative PR curve."""
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _classwise_ap(preds, gts, thresholds, iou_fn):
    """AP per (threshold, class) with the shared greedy protocol.

    ``preds`` entries are (class, score, payload); ``gts`` are
    (class, payload). Classes absent from both sides are excluded; classes
    predicted but absent from ground truth contribute AP 0.
    """
    classes = sorted({c for c, _, _ in preds} | {c for c, _ in gts})
    table: dict[float, dict[int, float]] = {}
    for thr in thresholds:
        table[thr] = {}
        for c in classes:
            c_preds = [p for p in preds if p[0] == c]
            c_gts = [g[1] for g in gts if g[0] == c]
            if not c_gts and not c_preds:
                continue
            if not c_gts:
                table[thr][c] = 0.0
                continue
            tp, n_gt = _greedy_pr(
                [(p[2], p[1]) for p in c_preds], c_gts,
                lambda pr, gt: iou_fn(pr[0], gt), thr,
            )
            table[thr][c] = _envelope_ap(tp, n_gt)
    return table


def _mask_iou(a, b) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


@dataclass
class APResult:
    per_threshold: dict  # threshold -> {class: AP}
    map_avg: float  # mean over classes then thresholds 0.50..0.95
    map50: float
    map25: float


def instance_ap(
    predictions,
    ground_truths,
    thresholds=MAP_THRESHOLDS + (0.25,),
) -> APResult:
    """AP over binary masks. ``predictions`` are (class, score, mask bool
    array); ``ground_truths`` are (class, mask)."""
    thresholds = tuple(float(t) for t in thresholds)
    if any(not (0.0 < t < 1.0) for t in thresholds):
        raise ContractError("IoU thresholds must lie in (0, 1)")
    table = _classwise_ap(predictions, ground_truths, thresholds, _mask_iou)
    return _summarize_ap(table)


def _summarize_ap(table) -> APResult:
    def mean_at(thr):
        values = list(table.get(thr, {}).values())
        return float(np.mean(values)) if values else 0.0

    present = [t for t in MAP_THRESHOLDS if t in table]
    map_avg = float(np.mean([mean_at(t) for t in present])) if present else 0.0
    return APResult(
        per_threshold=table,
        map_avg=map_avg,
        map50=mean_at(0.50),
        map25=mean_at(0.25),
    )


def box_iou(lo_a, hi_a, lo_b, hi_b) -> float:
    """3D IoU of axis-aligned boxes: intersection volume over union volume."""
    lo = np.maximum(np.asarray(lo_a, float), np.asarray(lo_b, float))
    hi = np.minimum(np.asarray(hi_a, float), np.asarray(hi_b, float))
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    vol_a = float(np.prod(np.asarray(hi_a, float) - np.asarray(lo_a, float)))
    vol_b = float(np.prod(np.asarray(hi_b, float) - np.asarray(lo_b, float)))
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


def box_ap(pred_boxes, gt_boxes, thresholds=(0.25, 0.5)) -> APResult:
    """Same greedy protocol as instance AP with box IoU.

    ``pred_boxes``: (class, score, (lo, hi)); ``gt_boxes``: (class, (lo, hi)).
    """
    table = _classwise_ap(
        pred_boxes, gt_boxes, tuple(thresholds),
        lambda a, b: box_iou(a[0], a[1], b[0], b[1]),
    )
    return _summarize_ap(table)


@dataclass
class PQResult:
    pq: float
    pq_things: float
    pq_stuff: float
    per_class: dict  # class id -> PQ


def panoptic_quality(
    pred_semantic: np.ndarray,
    pred_instance: np.ndarray,
    gt_semantic: np.ndarray,
    gt_instance: np.ndarray,
    catalog: ClassCatalog,
) -> PQResult:
    """PQ over (class, instance) units with the IoU > 0.5 matching rule.

    Units group identical (semantic, instance) pairs; stuff naturally forms
    one unit per class via instance -1. Ground-truth -1 semantics are void:
    excluded from every IoU denominator. The >0.5 rule makes matches unique,
    which is asserted rather than assumed.
    """
    pred_semantic = np.asarray(pred_semantic, dtype=np.int64)
    pred_instance = np.asarray(pred_instance, dtype=np.int64)
    gt_semantic = np.asarray(gt_semantic, dtype=np.int64)
    gt_instance = np.asarray(gt_instance, dtype=np.int64)
    if not (
        pred_semantic.shape == pred_instance.shape == gt_semantic.shape == gt_instance.shape
    ):
        raise ShapeError("panoptic arrays must share one shape")
    void = gt_semantic < 0

    def units(sem, inst, skip_void=False):
        out: dict[tuple[int, int], np.ndarray] = {}
        keys = np.stack([sem, inst], axis=1)
        for key in np.unique(keys, axis=0):
            c, i = int(key[0]), int(key[1])
            if c < 0:
                continue
            mask = (sem == c) & (inst == i)
            if skip_void:
                mask &= ~void
            if mask.any():
                out[(c, i)] = mask
        return out

    pred_units = units(pred_semantic, pred_instance)
    gt_units = units(gt_semantic, gt_instance, skip_void=True)

    stats: dict[int, list[float]] = {}  # class -> [sum_iou, tp, fp, fn]
    classes = {c for c, _ in pred_units} | {c for c, _ in gt_units}
    for c in classes:
        stats[c] = [0.0, 0, 0, 0]
    matched_gt: set[tuple[int, int]] = set()
    matched_pred: set[tuple[int, int]] = set()
    for (c, pi), pmask in pred_units.items():
        for (gc, gi), gmask in gt_units.items():
            if gc != c:
                continue
            inter = float(np.logical_and(pmask, gmask).sum())
            if inter == 0.0:
                continue
            pred_size = float((pmask & ~void).sum())
            union = pred_size + float(gmask.sum()) - inter
            iou = inter / union if union > 0 else 0.0
            if iou > 0.5:
                assert (gc, gi) not in matched_gt, "IoU>0.5 match must be unique"
                assert (c, pi) not in matched_pred
                matched_gt.add((gc, gi))
                matched_pred.add((c, pi))
                stats[c][0] += iou
                stats[c][1] += 1
    for key in pred_units:
        if key not in matched_pred:
            stats[key[0]][2] += 1
    for key in gt_units:
        if key not in matched_gt:
            stats[key[0]][3] += 1

    per_class = {}
    for c, (sum_iou, tp, fp, fn) in stats.items():
        denom = tp + 0.5 * fp + 0.5 * fn
        per_class[c] = float(sum_iou / denom) if denom > 0 else 0.0
    thing = set(catalog.thing_ids)
    things = [v for c, v in per_class.items() if c in thing]
    stuff = [v for c, v in per_class.items() if c not in thing]
    return PQResult(
        pq=float(np.mean(list(per_class.values()))) if per_class else 0.0,
        pq_things=float(np.mean(things)) if things else 0.0,
        pq_stuff=float(np.mean(stuff)) if stuff else 0.0,
        per_class=per_class,
    )


# -- aggregate report ---------------------------------------------------------

REPORT_KEYS = (
    "miou",
    "map",
    "map50",
    "map25",
    "pq",
    "pq_th",
    "pq_st",
    "box_map50",
    "box_map25",
)


@dataclass
class EvalReport:
    values: dict = field(default_factory=dict)  # key -> float or nan
    per_class: dict = field(default_factory=dict)  # metric -> {class: value}

    def __post_init__(self):
        for key in self.values:
            if key not in REPORT_KEYS:
                raise ContractError(f"unknown report key {key!r}")
        for key, value in self.values.items():
            if np.isfinite(value) and not (0.0 <= value <= 1.0):
                raise ContractError(f"report value {key}={value} outside [0, 1]")

    def to_lines(self) -> list[str]:
        lines = []
        for key in REPORT_KEYS:
            value = self.values.get(key, float("nan"))
            lines.append(f"{key} {repr(float(value))}")
        for metric in sorted(self.per_class):
            for cls in sorted(self.per_class[metric]):
                lines.append(f"{metric}.class.{cls} {repr(float(self.per_class[metric][cls]))}")
        return lines
