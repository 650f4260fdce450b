"""Point-set and box geometry.

Boxes are ``(..., 4)`` tensors in corner form ``(x_min, y_min, x_max, y_max)``;
point sets are ``(..., n, 2)`` tensors of ``(x, y)`` pairs in image pixels.
Everything here is differentiable through autograd and has no state, except
for :class:`MomentMultipliers`, which only holds the two learnable scalars of
the moment converter.

Center/size form ``(cx, cy, w, h)`` is only used at the bounding-box
regression boundary (:func:`bbox_regression_target`,
:func:`apply_bbox_regression`).
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
from torch import nn

DEFAULT_NUM_POINTS = 9
DEFAULT_PARTIAL_SUBSET = (0, 1, 2, 3)
CONVERTERS = ("minmax", "partial_minmax", "moment")


class Box(NamedTuple):
    """Plain scalar box, for the non-batched API and JSON round trips."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self, dtype=dtype)


def as_boxes(boxes) -> torch.Tensor:
    if isinstance(boxes, torch.Tensor):
        return boxes
    return torch.as_tensor(boxes, dtype=torch.float64)


def check_boxes(boxes: torch.Tensor) -> None:
    """Raise ``ValueError`` for non-finite boxes or inverted corners."""
    if boxes.shape[-1] != 4:
        raise ValueError(f"boxes must have a trailing dimension of 4, got {tuple(boxes.shape)}")
    if not torch.isfinite(boxes).all():
        raise ValueError("boxes contain non-finite coordinates")
    if (boxes[..., 2] < boxes[..., 0]).any() or (boxes[..., 3] < boxes[..., 1]).any():
        raise ValueError("invalid box: x_min > x_max or y_min > y_max")


def check_points(points: torch.Tensor) -> None:
    if points.ndim < 2 or points.shape[-1] != 2 or points.shape[-2] < 1:
        raise ValueError(f"point sets must have shape (..., n, 2) with n >= 1, got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise ValueError("point set contains non-finite coordinates")


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou(a, b) -> torch.Tensor:
    """Elementwise (broadcasting) intersection over union of two box tensors.

    Returns 0 where the union has zero area.
    """
    a, b = as_boxes(a), as_boxes(b)
    check_boxes(a)
    check_boxes(b)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(union))


def iou_matrix(a, b) -> torch.Tensor:
    """Pairwise IoU, ``(N, 4) x (M, 4) -> (N, M)``."""
    a, b = as_boxes(a), as_boxes(b)
    return iou(a[:, None, :], b[None, :, :])


def to_center_size(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0), dim=-1)


def to_corners(cxcywh: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = cxcywh.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def _gather_extreme(values: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return torch.gather(values, -1, index.unsqueeze(-1)).squeeze(-1)


def _minmax(points: torch.Tensor) -> torch.Tensor:
    # argmin/argmax return the first extreme index, so on ties the gradient
    # goes to the lowest-index point only.
    xs, ys = points[..., 0], points[..., 1]
    return torch.stack(
        (
            _gather_extreme(xs, xs.argmin(-1)),
            _gather_extreme(ys, ys.argmin(-1)),
            _gather_extreme(xs, xs.argmax(-1)),
            _gather_extreme(ys, ys.argmax(-1)),
        ),
        dim=-1,
    )


def pseudo_box_minmax(points: torch.Tensor) -> torch.Tensor:
    """Tight box around every point of the set."""
    check_points(points)
    return _minmax(points)


def pseudo_box_partial_minmax(points: torch.Tensor, subset: Sequence[int] = DEFAULT_PARTIAL_SUBSET) -> torch.Tensor:
    """Tight box around the points selected by ``subset``."""
    check_points(points)
    subset = list(subset)
    if not subset:
        raise ValueError("partial min-max needs a nonempty subset")
    n = points.shape[-2]
    if min(subset) < 0 or max(subset) >= n:
        raise ValueError(f"subset indices {subset} out of range for n={n}")
    return _minmax(points[..., subset, :])


def _population_std(values: torch.Tensor) -> torch.Tensor:
    var = values.var(dim=-1, unbiased=False)
    positive = var > 0
    # sqrt has an infinite slope at 0; a collapsed set gets zero extent and zero gradient
    safe = torch.where(positive, var, torch.ones_like(var))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(var))


def pseudo_box_moment(points: torch.Tensor, log_multipliers: torch.Tensor | None = None) -> torch.Tensor:
    """Box centered on the point mean with half-extent ``exp(lambda) * std``.

    ``log_multipliers`` holds ``(lambda_x_log, lambda_y_log)``; ``None`` means
    unit multipliers.
    """
    check_points(points)
    if points.shape[-2] < 2:
        raise ValueError("moment converter needs at least 2 points")
    if log_multipliers is None:
        log_multipliers = points.new_zeros(2)
    mean = points.mean(dim=-2)
    std = torch.stack((_population_std(points[..., 0]), _population_std(points[..., 1])), dim=-1)
    half = std * log_multipliers.to(points.dtype).exp()
    return torch.cat((mean - half, mean + half), dim=-1)


class MomentMultipliers(nn.Module):
    """Globally shared learnable extent multipliers, stored in log space."""

    def __init__(self):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(2))

    def forward(self) -> torch.Tensor:
        return self.log_scale


def convert(points: torch.Tensor, converter: str, log_multipliers: torch.Tensor | None = None,
            subset: Sequence[int] = DEFAULT_PARTIAL_SUBSET) -> torch.Tensor:
    """Dispatch to one of the three point-set to box converters by name."""
    if converter == "minmax":
        return pseudo_box_minmax(points)
    if converter == "partial_minmax":
        return pseudo_box_partial_minmax(points, subset)
    if converter == "moment":
        return pseudo_box_moment(points, log_multipliers)
    raise ValueError(f"unknown converter {converter!r}; expected one of {CONVERTERS}")


def refine_points(points: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Move point k by offset k."""
    if points.shape != offsets.shape:
        raise ValueError(f"points {tuple(points.shape)} and offsets {tuple(offsets.shape)} differ in shape")
    return points + offsets


def bbox_regression_target(proposal, target) -> torch.Tensor:
    """Normalized center shift and log size ratio taking ``proposal`` to ``target``."""
    proposal, target = as_boxes(proposal), as_boxes(target)
    check_boxes(proposal)
    check_boxes(target)
    p = to_center_size(proposal)
    t = to_center_size(target)
    if (p[..., 2:] <= 0).any():
        raise ValueError("proposal must have positive width and height")
    if (t[..., 2:] <= 0).any():
        raise ValueError("target must have positive width and height")
    return torch.stack(
        (
            (t[..., 0] - p[..., 0]) / p[..., 2],
            (t[..., 1] - p[..., 1]) / p[..., 3],
            torch.log(t[..., 2] / p[..., 2]),
            torch.log(t[..., 3] / p[..., 3]),
        ),
        dim=-1,
    )


def apply_bbox_regression(proposal, delta) -> torch.Tensor:
    """Inverse of :func:`bbox_regression_target`."""
    proposal, delta = as_boxes(proposal), as_boxes(delta)
    check_boxes(proposal)
    if not torch.isfinite(delta).all():
        raise ValueError("regression delta contains non-finite values")
    p = to_center_size(proposal)
    if (p[..., 2:] <= 0).any():
        raise ValueError("proposal must have positive width and height")
    out = torch.stack(
        (
            p[..., 0] + p[..., 2] * delta[..., 0],
            p[..., 1] + p[..., 3] * delta[..., 1],
            p[..., 2] * delta[..., 2].exp(),
            p[..., 3] * delta[..., 3].exp(),
        ),
        dim=-1,
    )
    return to_corners(out)
