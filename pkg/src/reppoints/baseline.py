"""Bounding-box baseline detector with the same two-stage layout.

Each location holds a single square anchor of side ``4 * stride``.  Stage 1
regresses the anchor, stage 2 regresses the stage-1 box, both through
:func:`~reppoints.geometry.apply_bbox_regression`.  Stage-2 and
classification features are sampled on the 3x3 cell-center grid of the
stage-1 box via the deformable conv with a fixed (unlearned) offset field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .assignment import LEVELS, assign, location_centers
from .deform import DeformConv3x3, grid_template
from .geometry import apply_bbox_regression, bbox_regression_target
from .losses import LossConfig, combine_losses, smooth_l1
from .model import PRIOR_PROB, Backbone, ModelConfig, conv_gn

ANCHOR_SCALE = 4
DELTA_STDS = (0.1, 0.1, 0.2, 0.2)
MAX_LOG_RATIO = math.log(1000.0 / 16)


def anchors_for(shapes, dtype=torch.float32) -> torch.Tensor:
    """One square anchor of side ``4 * stride`` centered on every location, ``(L, 4)``."""
    centers, strides = location_centers(shapes, dtype)
    half = (ANCHOR_SCALE * strides / 2).unsqueeze(-1)
    return torch.cat((centers - half, centers + half), dim=-1)


def decode(proposals: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    stds = deltas.new_tensor(DELTA_STDS)
    d = deltas * stds
    d = torch.cat((d[..., :2], d[..., 2:].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO)), dim=-1)
    return apply_bbox_regression(proposals, d)


def encode(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return bbox_regression_target(proposals, targets) / proposals.new_tensor(DELTA_STDS)


def box_grid_field(boxes: torch.Tensor, stride: int) -> torch.Tensor:
    """Kernel offset field sampling the 3x3 cell centers of per-location boxes.

    ``boxes`` is ``(B, H, W, 4)`` in image pixels; the result is ``(B, 18, H, W)``.
    """
    b, h, w, _ = boxes.shape
    cells = (torch.arange(3, dtype=boxes.dtype) + 0.5) / 3
    ky, kx = torch.meshgrid(cells, cells, indexing="ij")
    kx, ky = kx.reshape(-1), ky.reshape(-1)
    x0, y0, x1, y1 = (boxes[..., i].unsqueeze(-1) for i in range(4))
    sx = (x0 + kx * (x1 - x0)) / stride - 0.5  # feature coordinates, (B, H, W, 9)
    sy = (y0 + ky * (y1 - y0)) / stride - 0.5
    ii, jj = torch.meshgrid(torch.arange(h, dtype=boxes.dtype), torch.arange(w, dtype=boxes.dtype), indexing="ij")
    grid = grid_template(boxes.dtype)
    dx = sx - jj[..., None] - grid[:, 0]
    dy = sy - ii[..., None] - grid[:, 1]
    return torch.stack((dx, dy), dim=-1).reshape(b, h, w, 18).permute(0, 3, 1, 2)


@dataclass
class BoxOutputs:
    cls_logits: torch.Tensor  # (B, L, C)
    deltas1: torch.Tensor  # (B, L, 4)
    deltas2: torch.Tensor
    anchors: torch.Tensor  # (L, 4)
    boxes1: torch.Tensor  # (B, L, 4)
    boxes2: torch.Tensor
    strides: torch.Tensor
    shapes: list = field(default_factory=list)

    def boxes(self, stage: int) -> torch.Tensor:
        return self.boxes1 if stage == 1 else self.boxes2


class BoxHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.head_channels
        self.rec_feedback = config.rec_feedback
        self.loc_convs = nn.Sequential(*(conv_gn(ch, ch) for _ in range(config.stacked_convs)))
        self.cls_convs = nn.Sequential(*(conv_gn(ch, ch) for _ in range(config.stacked_convs)))
        self.reg_init = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(ch, 4, 1))
        self.reg_refine_dcn = DeformConv3x3(ch, ch)
        self.reg_refine_out = nn.Conv2d(ch, 4, 1)
        self.cls_dcn = DeformConv3x3(ch, ch)
        self.cls_out = nn.Conv2d(ch, config.num_classes, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for dcn in (self.reg_refine_dcn, self.cls_dcn):
            nn.init.normal_(dcn.weight, std=0.01)
            nn.init.zeros_(dcn.bias)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))

    def forward(self, feature: torch.Tensor, anchors: torch.Tensor, stride: int):
        """``anchors`` is ``(H*W, 4)`` for this level."""
        b, _, h, w = feature.shape
        loc_feat = self.loc_convs(feature)
        cls_feat = self.cls_convs(feature)
        d1 = self.reg_init(loc_feat).permute(0, 2, 3, 1).reshape(b, h * w, 4)
        boxes1 = decode(anchors.unsqueeze(0).expand(b, -1, -1), d1)
        offset_field = box_grid_field(boxes1.reshape(b, h, w, 4), stride)
        cls_field = offset_field if self.rec_feedback else offset_field.detach()
        d2 = self.reg_refine_out(F.relu(self.reg_refine_dcn(loc_feat, offset_field)))
        d2 = d2.permute(0, 2, 3, 1).reshape(b, h * w, 4)
        boxes2 = decode(boxes1.detach(), d2)
        logits = self.cls_out(F.relu(self.cls_dcn(cls_feat, cls_field)))
        return logits.permute(0, 2, 3, 1).reshape(b, h * w, -1), d1, d2, boxes1, boxes2


def bbox_detector_loss(model, images: torch.Tensor, gt_boxes: list, gt_labels: list, loss_config: LossConfig):
    """Smooth-L1 on normalized regression deltas for both stages plus focal loss."""
    out = model(images)
    h, w = images.shape[-2:]
    loc1, loc2, assignments = [], [], []
    for i, (boxes, labels) in enumerate(zip(gt_boxes, gt_labels)):
        gts = torch.as_tensor(boxes, dtype=torch.float64)
        res = assign(gts, labels, out.boxes1[i].detach(), out.shapes, (h, w))
        assignments.append(res)
        gts = gts.to(out.deltas1.dtype)
        idx = (res.stage1_pos >= 0).nonzero().flatten()
        if idx.numel():
            target = encode(out.anchors[idx], gts[res.stage1_pos[idx]])
            loc1.append(smooth_l1(out.deltas1[i, idx] - target, loss_config.smooth_l1_beta).sum(-1))
        idx = (res.stage2_pos >= 0).nonzero().flatten()
        if idx.numel():
            target = encode(out.boxes1[i, idx].detach(), gts[res.stage2_pos[idx]])
            loc2.append(smooth_l1(out.deltas2[i, idx] - target, loss_config.smooth_l1_beta).sum(-1))
    cat = lambda xs: torch.cat(xs) if xs else out.cls_logits.new_zeros(0)
    labels = torch.cat([r.cls_label for r in assignments])
    return combine_losses(out.cls_logits.reshape(-1, out.cls_logits.shape[-1]), labels, cat(loc1), cat(loc2),
                          loss_config)


class BBoxDet(nn.Module):
    """Box-representation counterpart of :class:`~reppoints.model.RPDet`."""

    detector_loss = staticmethod(bbox_detector_loss)

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.backbone = Backbone(self.config.base_channels, self.config.head_channels)
        self.head = BoxHead(self.config)

    def forward(self, images: torch.Tensor) -> BoxOutputs:
        feats = self.backbone(images)
        shapes = [tuple(f.shape[-2:]) for f in feats]
        anchors = anchors_for(shapes, images.dtype)
        _, strides = location_centers(shapes, images.dtype)
        starts = [0]
        for h, w in shapes:
            starts.append(starts[-1] + h * w)
        parts = [self.head(f, anchors[s:e], 2 ** level)
                 for f, level, s, e in zip(feats, LEVELS, starts[:-1], starts[1:])]
        logits, d1, d2, b1, b2 = (torch.cat(xs, 1) for xs in zip(*parts))
        return BoxOutputs(logits, d1, d2, anchors, b1, b2, strides, shapes)
