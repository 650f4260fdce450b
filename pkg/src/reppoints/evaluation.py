"""COCO-style average precision for axis-aligned boxes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class ExportError(ValueError):
    pass


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    per_class: dict = field(default_factory=dict)
    # precision[t, r, k]: interpolated precision, -1 where class k has no ground truth
    precision: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def _iou_xywh(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[x, y, w, h]`` rows, ``(D, G)``."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    dx0, dy0 = dets[:, 0:1], dets[:, 1:2]
    dx1, dy1 = dx0 + dets[:, 2:3], dy0 + dets[:, 3:4]
    gx0, gy0 = gts[:, 0], gts[:, 1]
    gx1, gy1 = gx0 + gts[:, 2], gy0 + gts[:, 3]
    iw = np.clip(np.minimum(dx1, gx1) - np.maximum(dx0, gx0), 0, None)
    ih = np.clip(np.minimum(dy1, gy1) - np.maximum(dy0, gy0), 0, None)
    inter = iw * ih
    union = dets[:, 2:3] * dets[:, 3:4] + gts[:, 2] * gts[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def validate_detections(detections) -> list[dict]:
    """Check a COCO results list; errors name the offending entry."""
    if not isinstance(detections, list):
        raise ExportError("detections export must be a JSON array")
    for i, det in enumerate(detections):
        if not isinstance(det, dict):
            raise ExportError(f"entry {i}: expected an object, got {type(det).__name__}")
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in det:
                raise ExportError(f"entry {i}: missing key {key!r}")
        bbox = det["bbox"]
        if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
            raise ExportError(f"entry {i}: bbox must be [x, y, w, h]")
        if not all(np.isfinite(float(v)) for v in bbox) or bbox[2] < 0 or bbox[3] < 0:
            raise ExportError(f"entry {i}: bbox {bbox} is not a finite nonnegative-size box")
        if not np.isfinite(float(det["score"])):
            raise ExportError(f"entry {i}: non-finite score")
    return detections


def load_detections(path) -> list[dict]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ExportError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return validate_detections(data)


def _match_image(dets: np.ndarray, gts: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy matching in score order; ``dets`` must already be sorted."""
    ious = _iou_xywh(dets, gts)
    matched_gt = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for d in range(len(dets)):
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for g in range(len(gts)):
            if matched_gt[g] or ious[d, g] < best_iou:
                continue
            if best == -1 or ious[d, g] > best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            matched_gt[best] = True
            tp[d] = True
    return tp


def _interpolated_precision(tp: np.ndarray, num_gt: int) -> np.ndarray:
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / num_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # make precision monotone non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(len(RECALL_POINTS))
    valid = idx < len(precision)
    out[valid] = precision[idx[valid]]
    return out


def evaluate(detections: list[dict], coco: dict) -> EvalResult:
    """AP over IoU 0.50:0.05:0.95, AP50, AP75, and per-class AP.

    Detections are ranked per image (at most 100 kept), greedily matched to
    the highest-IoU unmatched GT, and scored with 101-point interpolation.
    Classes without ground truth are left out of the means.
    """
    validate_detections(detections)
    image_ids = {int(img["id"]) for img in coco["images"]}
    categories = sorted(int(c["id"]) for c in coco["categories"])
    gts: dict[tuple[int, int], list] = {}
    for ann in coco["annotations"]:
        gts.setdefault((int(ann["image_id"]), int(ann["category_id"])), []).append(ann["bbox"])
    per_image: dict[int, list] = {}
    for i, det in enumerate(detections):
        image_id = int(det["image_id"])
        if image_id not in image_ids:
            raise ExportError(f"entry {i}: unknown image_id {image_id}")
        per_image.setdefault(image_id, []).append((-float(det["score"]), i))
    kept: dict[tuple[int, int], list] = {}
    for image_id, items in per_image.items():
        for _, i in sorted(items)[:MAX_DETS]:
            det = detections[i]
            kept.setdefault((image_id, int(det["category_id"])), []).append(i)

    precision = -np.ones((len(IOU_THRESHOLDS), len(RECALL_POINTS), len(categories)))
    for k, cat in enumerate(categories):
        num_gt = sum(len(v) for (img, c), v in gts.items() if c == cat)
        if num_gt == 0:
            continue
        for t, thr in enumerate(IOU_THRESHOLDS):
            scores, flags = [], []
            for image_id in sorted(image_ids):
                idx = kept.get((image_id, cat), [])
                if not idx:
                    continue
                idx = sorted(idx, key=lambda i: (-float(detections[i]["score"]), i))
                d = np.array([detections[i]["bbox"] for i in idx], dtype=np.float64).reshape(-1, 4)
                g = np.array(gts.get((image_id, cat), []), dtype=np.float64).reshape(-1, 4)
                flags.append(_match_image(d, g, thr))
                scores.append(np.array([float(detections[i]["score"]) for i in idx]))
            if not scores:
                precision[t, :, k] = 0.0
                continue
            s = np.concatenate(scores)
            f = np.concatenate(flags)
            order = np.argsort(-s, kind="mergesort")
            precision[t, :, k] = _interpolated_precision(f[order], num_gt)

    def summarize(p: np.ndarray) -> float:
        valid = p[p > -1]
        return float(valid.mean()) if valid.size else 0.0

    per_class = {}
    for k, cat in enumerate(categories):
        if (precision[:, :, k] > -1).any():
            per_class[cat] = summarize(precision[:, :, k])
    return EvalResult(
        AP=summarize(precision),
        AP50=summarize(precision[0]),
        AP75=summarize(precision[5]),
        per_class=per_class,
        precision=precision,
    )
