"""Target assignment over the feature pyramid.

All per-location tensors are flattened over levels 3..7 in order, each level
row-major, so a single index addresses a location anywhere in the pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .geometry import as_boxes, box_area, check_boxes, iou_matrix

LEVELS = (3, 4, 5, 6, 7)
MIN_LEVEL, MAX_LEVEL = LEVELS[0], LEVELS[-1]

BACKGROUND = -1
IGNORE = -2

STAGE2_POS_IOU = 0.5
CLS_POS_IOU = 0.5
CLS_NEG_IOU = 0.4


@dataclass(frozen=True)
class PyramidLocation:
    level: int
    iy: int
    ix: int

    @property
    def stride(self) -> int:
        return 2 ** self.level


@dataclass
class AssignmentResult:
    """Per-location labels for one image.

    ``stage1_pos`` / ``stage2_pos`` hold the ground-truth index of positive
    locations and -1 elsewhere.  ``cls_label`` holds a class id, ``BACKGROUND``
    or ``IGNORE`` for every location.
    """

    stage1_pos: torch.Tensor
    stage2_pos: torch.Tensor
    cls_label: torch.Tensor


def level_offsets(shapes: Sequence[tuple[int, int]]) -> list[int]:
    starts, total = [], 0
    for h, w in shapes:
        starts.append(total)
        total += h * w
    return starts


def location_centers(shapes: Sequence[tuple[int, int]], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Image-space centers ``(L, 2)`` and strides ``(L,)`` of every location."""
    centers, strides = [], []
    for level, (h, w) in zip(LEVELS, shapes):
        s = 2 ** level
        ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
        centers.append(torch.stack(((xs.reshape(-1) + 0.5) * s, (ys.reshape(-1) + 0.5) * s), dim=-1))
        strides.append(torch.full((h * w,), float(s), dtype=dtype))
    return torch.cat(centers), torch.cat(strides)


def pyramid_level(box) -> int:
    """Pyramid level of a ground-truth box, clamped to the available levels."""
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    if not (w > 0 and h > 0):
        raise ValueError(f"box {tuple(box)} has no area")
    level = math.floor(math.log2(math.sqrt(w * h) / 4))
    return min(max(level, MIN_LEVEL), MAX_LEVEL)


def pyramid_levels(boxes: torch.Tensor) -> torch.Tensor:
    """Vectorized :func:`pyramid_level` over ``(G, 4)`` boxes."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    if ((w <= 0) | (h <= 0)).any():
        raise ValueError("ground-truth boxes must have positive area")
    level = torch.floor(torch.log2(torch.sqrt(w.double() * h.double()) / 4)).long()
    return level.clamp(MIN_LEVEL, MAX_LEVEL)


def assign_stage1(gt_boxes, shapes: Sequence[tuple[int, int]], image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """One positive location per ground truth: its level, the bin holding its center.

    When several ground truths land in the same bin, the one with the smallest
    area wins (lowest index on equal area) and the others get no positive.
    ``image_size`` is ``(height, width)``; it defaults to the level-3 extent.
    """
    gt_boxes = as_boxes(gt_boxes)
    total = sum(h * w for h, w in shapes)
    result = torch.full((total,), -1, dtype=torch.long)
    if gt_boxes.numel() == 0:
        return result
    check_boxes(gt_boxes)
    if image_size is None:
        image_size = (shapes[0][0] * 2 ** MIN_LEVEL, shapes[0][1] * 2 ** MIN_LEVEL)
    cx = (gt_boxes[:, 0] + gt_boxes[:, 2]).double() / 2
    cy = (gt_boxes[:, 1] + gt_boxes[:, 3]).double() / 2
    outside = (cx < 0) | (cy < 0) | (cx >= image_size[1]) | (cy >= image_size[0])
    if outside.any():
        raise ValueError(f"ground truth centers outside the image: indices {outside.nonzero().flatten().tolist()}")
    levels = pyramid_levels(gt_boxes)
    strides = (2 ** levels).double()
    ix = torch.floor(cx / strides).long()
    iy = torch.floor(cy / strides).long()
    starts = level_offsets(shapes)
    flat = torch.empty_like(levels)
    for g in range(len(levels)):
        li = int(levels[g]) - MIN_LEVEL
        h, w = shapes[li]
        flat[g] = starts[li] + min(int(iy[g]), h - 1) * w + min(int(ix[g]), w - 1)
    areas = box_area(gt_boxes).double()
    # visit largest first so the smallest-area (then lowest-index) GT writes last
    order = sorted(range(len(levels)), key=lambda g: (-float(areas[g]), -g))
    for g in order:
        result[flat[g]] = g
    return result


def _max_iou(pseudo_boxes: torch.Tensor, gt_boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ious = iou_matrix(pseudo_boxes.detach().double(), gt_boxes.double())
    # argmax returns the first maximal index: ties go to the lowest GT index
    return ious.max(dim=1).values, ious.argmax(dim=1)


def assign_stage2(pseudo_boxes: torch.Tensor, gt_boxes) -> torch.Tensor:
    """Locations whose stage-1 pseudo box overlaps a GT with IoU strictly above 0.5."""
    gt_boxes = as_boxes(gt_boxes)
    result = torch.full((pseudo_boxes.shape[0],), -1, dtype=torch.long)
    if gt_boxes.numel() == 0:
        return result
    best, arg = _max_iou(pseudo_boxes, gt_boxes)
    pos = best > STAGE2_POS_IOU
    result[pos] = arg[pos]
    return result


def assign_classification(pseudo_boxes: torch.Tensor, gt_boxes, gt_labels) -> torch.Tensor:
    """Class id where max IoU >= 0.5, background below 0.4, ignore in between."""
    gt_boxes = as_boxes(gt_boxes)
    labels = torch.full((pseudo_boxes.shape[0],), BACKGROUND, dtype=torch.long)
    if gt_boxes.numel() == 0:
        return labels
    gt_labels = torch.as_tensor(gt_labels, dtype=torch.long)
    best, arg = _max_iou(pseudo_boxes, gt_boxes)
    labels[(best >= CLS_NEG_IOU) & (best < CLS_POS_IOU)] = IGNORE
    pos = best >= CLS_POS_IOU
    labels[pos] = gt_labels[arg[pos]]
    return labels


def assign(gt_boxes, gt_labels, stage1_pseudo_boxes: torch.Tensor, shapes, image_size=None) -> AssignmentResult:
    return AssignmentResult(
        stage1_pos=assign_stage1(gt_boxes, shapes, image_size),
        stage2_pos=assign_stage2(stage1_pseudo_boxes, gt_boxes),
        cls_label=assign_classification(stage1_pseudo_boxes, gt_boxes, gt_labels),
    )


def center_collisions(gt_boxes, shapes, image_size=None) -> int:
    """Number of ground truths that lose their stage-1 positive to a collision."""
    gt_boxes = as_boxes(gt_boxes)
    if gt_boxes.numel() == 0:
        return 0
    pos = assign_stage1(gt_boxes, shapes, image_size)
    return int(gt_boxes.shape[0] - (pos >= 0).sum())
