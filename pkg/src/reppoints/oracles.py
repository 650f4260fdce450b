"""Slow, independent reference implementations for tests and acceptance.

Nothing in here imports the production geometry, assignment, NMS or
evaluation code.  Everything is plain Python loops over floats.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_AP_DETECTIONS = 4
MAX_AP_GTS = 3
MAX_NMS_BOXES = 200


@dataclass
class FiniteDiffSpec:
    step: float = 1e-4
    kink_tol: float = 1e-2

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("finite-difference step must be positive")


@dataclass
class FDResult:
    gradient: np.ndarray
    # coordinates where forward and backward one-sided slopes disagree
    nondifferentiable: np.ndarray

    @property
    def smooth(self) -> bool:
        return not self.nondifferentiable.any()


def fd_gradient(fn: Callable[[np.ndarray], float], x, settings: FiniteDiffSpec | None = None) -> FDResult:
    """Central-difference gradient of a scalar function of an array."""
    settings = settings or FiniteDiffSpec()
    x = np.array(x, dtype=np.float64)
    f0 = float(fn(x.copy()))
    if not math.isfinite(f0):
        raise FloatingPointError(f"function is non-finite at the base point: {f0}")
    grad = np.zeros_like(x)
    kinks = np.zeros(x.shape, dtype=bool)
    h = settings.step
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fp, fm = float(fn(xp)), float(fn(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {idx}: f(+h)={fp}, f(-h)={fm}")
        grad[idx] = (fp - fm) / (2 * h)
        forward, backward = (fp - f0) / h, (f0 - fm) / h
        if abs(forward - backward) > settings.kink_tol * max(1.0, abs(grad[idx])):
            kinks[idx] = True
    return FDResult(grad, kinks)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


# --- assignment ------------------------------------------------------------

def brute_assign(gt_boxes, gt_labels, pseudo_boxes, shapes, image_size=None, levels=(3, 4, 5, 6, 7)):
    """Apply the stage-1 / stage-2 / classification rules location by location.

    Returns three lists over the flattened locations: stage-1 GT index,
    stage-2 GT index (-1 for none) and class label (-1 background, -2 ignore).
    """
    gt_boxes = [tuple(float(v) for v in b) for b in np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)]
    gt_labels = [int(v) for v in np.asarray(gt_labels).reshape(-1)]
    pseudo = [tuple(float(v) for v in b) for b in np.asarray(pseudo_boxes, dtype=np.float64).reshape(-1, 4)]
    if image_size is None:
        image_size = (shapes[0][0] * 2 ** levels[0], shapes[0][1] * 2 ** levels[0])

    def gt_level(box):
        w, h = box[2] - box[0], box[3] - box[1]
        s = math.floor(math.log2(math.sqrt(w * h) / 4))
        return min(max(s, levels[0]), levels[-1])

    locations = [(lvl, iy, ix) for lvl, (h, w) in zip(levels, shapes) for iy in range(h) for ix in range(w)]
    stage1, stage2, cls = [], [], []
    for loc_index, (lvl, iy, ix) in enumerate(locations):
        stride = 2 ** lvl
        h, w = shapes[levels.index(lvl)]
        claimants = []
        for g, box in enumerate(gt_boxes):
            cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            if not (0 <= cx < image_size[1] and 0 <= cy < image_size[0]):
                raise ValueError("ground-truth center outside the image")
            bx = min(math.floor(cx / stride), w - 1)
            by = min(math.floor(cy / stride), h - 1)
            if gt_level(box) == lvl and bx == ix and by == iy:
                area = (box[2] - box[0]) * (box[3] - box[1])
                claimants.append((area, g))
        stage1.append(min(claimants)[1] if claimants else -1)

        best_iou, best_g = -1.0, -1
        for g, box in enumerate(gt_boxes):
            v = _iou(pseudo[loc_index], box)
            if v > best_iou:
                best_iou, best_g = v, g
        stage2.append(best_g if best_g >= 0 and best_iou > 0.5 else -1)
        if best_g < 0 or best_iou < 0.4:
            cls.append(-1)
        elif best_iou < 0.5:
            cls.append(-2)
        else:
            cls.append(gt_labels[best_g])
    return stage1, stage2, cls


# --- NMS -------------------------------------------------------------------

def brute_nms(boxes, scores, class_ids, iou_threshold: float = 0.5) -> list[int]:
    """Kept indices in priority order, by the all-pairs definition of greedy NMS."""
    boxes = [tuple(b) for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4)]
    if len(boxes) > MAX_NMS_BOXES:
        raise ValueError(f"brute_nms is capped at {MAX_NMS_BOXES} boxes")
    scores = [float(s) for s in np.asarray(scores).reshape(-1)]
    class_ids = [int(c) for c in np.asarray(class_ids).reshape(-1)]
    n = len(boxes)
    # i outranks j if it has the higher score, or the same score and lower index
    outranks = [[(scores[i], -i) > (scores[j], -j) for j in range(n)] for i in range(n)]
    ranked = sorted(range(n), key=lambda j: sum(outranks[i][j] for i in range(n)))
    kept: list[int] = []
    for j in ranked:
        if all(not (class_ids[i] == class_ids[j] and _iou(boxes[i], boxes[j]) > iou_threshold) for i in kept):
            kept.append(j)
    return kept


# --- average precision -----------------------------------------------------

def _greedy_by_enumeration(det_boxes, gt_boxes, threshold) -> list[bool]:
    """True-positive flags chosen as the lexicographically best matching.

    Every injective partial matching is enumerated; the winner maximizes, in
    detection order, (IoU, lowest GT index) for each detection in turn.
    """
    nd, ng = len(det_boxes), len(gt_boxes)
    ious = [[_iou(d, g) for g in gt_boxes] for d in det_boxes]
    best_key, best = None, None
    options = [None] + list(range(ng))
    for choice in itertools.product(options, repeat=nd):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        if any(c is not None and ious[d][c] < min(threshold, 1 - 1e-10) for d, c in enumerate(choice)):
            continue
        key = tuple((ious[d][c], -c) if c is not None else (-1.0, 0) for d, c in enumerate(choice))
        if best_key is None or key > best_key:
            best_key, best = key, choice
    return [c is not None for c in best]


def brute_ap(detections: list[dict], coco: dict) -> dict:
    """AP / AP50 / AP75 by exhaustive matching; small instances only."""
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    thresholds = [round(t, 2) for t in thresholds]
    recall_points = [i * 0.01 for i in range(101)]
    recall_points[-1] = 1.0
    categories = sorted(int(c["id"]) for c in coco["categories"])
    image_ids = sorted(int(im["id"]) for im in coco["images"])

    def xyxy(b):
        return (b[0], b[1], b[0] + b[2], b[1] + b[3])

    per_image_dets: dict[int, list[int]] = {}
    for i, d in enumerate(detections):
        per_image_dets.setdefault(int(d["image_id"]), []).append(i)
    for img, idx in per_image_dets.items():
        if len(idx) > MAX_AP_DETECTIONS:
            raise ValueError(f"brute_ap is capped at {MAX_AP_DETECTIONS} detections per image")
    gts: dict[tuple[int, int], list] = {}
    for ann in coco["annotations"]:
        gts.setdefault((int(ann["image_id"]), int(ann["category_id"])), []).append(xyxy(ann["bbox"]))
    for img in image_ids:
        if sum(len(v) for (i, _), v in gts.items() if i == img) > MAX_AP_GTS:
            raise ValueError(f"brute_ap is capped at {MAX_AP_GTS} ground truths per image")

    table = {}  # (threshold index, category) -> list of 101 precisions
    for cat in categories:
        num_gt = sum(len(v) for (i, c), v in gts.items() if c == cat)
        if num_gt == 0:
            continue
        for t, thr in enumerate(thresholds):
            ranked = []  # (-score, image, index, is_tp)
            for img in image_ids:
                idx = [i for i in per_image_dets.get(img, []) if int(detections[i]["category_id"]) == cat]
                idx.sort(key=lambda i: (-float(detections[i]["score"]), i))
                flags = _greedy_by_enumeration([xyxy(detections[i]["bbox"]) for i in idx],
                                               gts.get((img, cat), []), thr)
                ranked += [(-float(detections[i]["score"]), img, i, f) for i, f in zip(idx, flags)]
            ranked.sort(key=lambda r: r[:3])
            pr = []
            tp = 0
            for k, r in enumerate(ranked, start=1):
                tp += r[3]
                pr.append((tp / num_gt, tp / k))
            table[(t, cat)] = [max([p for rec, p in pr if rec >= r], default=0.0) for r in recall_points]

    def mean(values):
        values = list(values)
        return math.fsum(values) / len(values) if values else 0.0

    return {
        "AP": mean(p for v in table.values() for p in v),
        "AP50": mean(p for (t, _), v in table.items() if t == 0 for p in v),
        "AP75": mean(p for (t, _), v in table.items() if t == 5 for p in v),
    }
