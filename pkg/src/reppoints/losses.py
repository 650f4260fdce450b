"""Localization and classification losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .assignment import BACKGROUND, IGNORE
from .geometry import DEFAULT_PARTIAL_SUBSET, check_boxes, convert

PROB_EPS = 1e-6


@dataclass
class LossConfig:
    smooth_l1_beta: float = 1.0 / 9.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loc_weight_stage1: float = 0.5
    loc_weight_stage2: float = 1.0
    cls_weight: float = 1.0

    def __post_init__(self):
        if not self.smooth_l1_beta > 0:
            raise ValueError("smooth_l1_beta must be positive")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be nonnegative")
        if min(self.loc_weight_stage1, self.loc_weight_stage2, self.cls_weight) < 0:
            raise ValueError("loss weights must be nonnegative")


def smooth_l1(x, beta: float = 1.0 / 9.0):
    if not beta > 0:
        raise ValueError("beta must be positive")
    x = torch.as_tensor(x)
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def focal_loss(p, positive, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise focal loss on probabilities; ``positive`` is a bool mask."""
    p = torch.as_tensor(p).clamp(PROB_EPS, 1 - PROB_EPS)
    positive = torch.as_tensor(positive, dtype=torch.bool)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return torch.where(positive, pos, neg)


def corner_distance_loss(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, stride, beta: float) -> torch.Tensor:
    """Sum of smooth-L1 over the four stride-normalized corner differences."""
    stride = torch.as_tensor(stride, dtype=pred_boxes.dtype)
    if stride.ndim:
        stride = stride.unsqueeze(-1)
    diff = (pred_boxes - gt_boxes.to(pred_boxes.dtype)) / stride
    return smooth_l1(diff, beta).sum(dim=-1)


def points_localization_loss(points: torch.Tensor, gt_box, converter: str = "minmax", stride=8,
                             log_multipliers=None, beta: float = 1.0 / 9.0) -> torch.Tensor:
    gt_box = torch.as_tensor(gt_box, dtype=points.dtype)
    check_boxes(gt_box)
    if ((gt_box[..., 2] <= gt_box[..., 0]) | (gt_box[..., 3] <= gt_box[..., 1])).any():
        raise ValueError("degenerate ground-truth box")
    if (torch.as_tensor(stride) <= 0).any():
        raise ValueError("stride must be positive")
    return corner_distance_loss(convert(points, converter, log_multipliers), gt_box, stride, beta)


def classification_loss(cls_logits: torch.Tensor, cls_labels: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Focal loss summed over every non-ignored location and class."""
    num_classes = cls_logits.shape[-1]
    keep = cls_labels != IGNORE
    logits = cls_logits[keep]
    labels = cls_labels[keep]
    target = torch.zeros_like(logits, dtype=torch.bool)
    fg = labels != BACKGROUND
    target[fg.nonzero().flatten(), labels[fg]] = True
    if logits.shape[-1] != num_classes:
        raise ValueError("class dimension mismatch")
    return focal_loss(torch.sigmoid(logits), target, config.focal_alpha, config.focal_gamma).sum()


def combine_losses(cls_logits: torch.Tensor, cls_labels: torch.Tensor, loc1: torch.Tensor, loc2: torch.Tensor,
                   config: LossConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the three terms.

    ``cls_logits`` is ``(N, C)`` with ``cls_labels`` ``(N,)`` over every
    location of the batch; ``loc1``/``loc2`` hold one loss per positive.
    """
    if cls_logits.shape[:-1] != cls_labels.shape:
        raise ValueError(f"logits {tuple(cls_logits.shape)} and labels {tuple(cls_labels.shape)} disagree")
    num_pos = int(((cls_labels != BACKGROUND) & (cls_labels != IGNORE)).sum())
    cls = classification_loss(cls_logits, cls_labels, config) / max(1, num_pos)
    zero = cls_logits.sum() * 0
    l1 = loc1.mean() if loc1.numel() else zero
    l2 = loc2.mean() if loc2.numel() else zero
    total = config.cls_weight * cls + config.loc_weight_stage1 * l1 + config.loc_weight_stage2 * l2
    terms = {"total": float(total.detach()), "cls": float(cls.detach()), "loc1": float(l1.detach()), "loc2": float(l2.detach())}
    return total, terms


def total_loss(outputs, assignments, gt_boxes, config: LossConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Loss of a point-set detector.

    ``outputs`` carries ``cls_logits`` (B, L, C), ``points1``/``points2``
    (B, L, n, 2), ``strides`` (L,), ``converter`` and ``log_multipliers``;
    ``assignments`` and ``gt_boxes`` are per-image lists.
    """
    b = outputs.cls_logits.shape[0]
    if len(assignments) != b or len(gt_boxes) != b:
        raise ValueError(f"batch of {b} outputs but {len(assignments)} assignments / {len(gt_boxes)} targets")
    num_locations = outputs.cls_logits.shape[1]
    loc_terms = {1: [], 2: []}
    for i, (res, gts) in enumerate(zip(assignments, gt_boxes)):
        if res.cls_label.shape[0] != num_locations:
            raise ValueError("assignment does not cover every location")
        gts = torch.as_tensor(gts, dtype=outputs.points1.dtype)
        for stage, pos, pts in ((1, res.stage1_pos, outputs.points1), (2, res.stage2_pos, outputs.points2)):
            idx = (pos >= 0).nonzero().flatten()
            if idx.numel():
                boxes = convert(pts[i, idx], outputs.converter, outputs.log_multipliers,
                                getattr(outputs, "partial_subset", DEFAULT_PARTIAL_SUBSET))
                loc_terms[stage].append(
                    corner_distance_loss(boxes, gts[pos[idx]], outputs.strides[idx], config.smooth_l1_beta))
    cat = lambda xs: torch.cat(xs) if xs else outputs.cls_logits.new_zeros(0)
    labels = torch.cat([res.cls_label for res in assignments])
    return combine_losses(outputs.cls_logits.reshape(-1, outputs.cls_logits.shape[-1]), labels,
                          cat(loc_terms[1]), cat(loc_terms[2]), config)
