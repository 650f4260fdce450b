"""Desk-scale FPN backbone and the two-stage point-set detection head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .assignment import LEVELS, location_centers
from .deform import DeformConv3x3, grid_template, points_to_offset_field
from .geometry import CONVERTERS, DEFAULT_PARTIAL_SUBSET, MomentMultipliers, convert

STRIDES = tuple(2 ** level for level in LEVELS)
PRIOR_PROB = 0.01
INIT_SPREAD = 2.0


@dataclass
class ModelConfig:
    num_classes: int = 3
    base_channels: int = 32
    head_channels: int = 64
    stacked_convs: int = 3
    num_points: int = 9
    converter: str = "minmax"
    partial_subset: tuple = DEFAULT_PARTIAL_SUBSET
    # False cuts recognition feedback: the classification branch sees a
    # detached copy of the offset field
    rec_feedback: bool = True

    def __post_init__(self):
        if self.converter not in CONVERTERS:
            raise ValueError(f"unknown converter {self.converter!r}")
        if self.num_points != 9:
            raise ValueError("the deformable head needs exactly 9 points")
        self.partial_subset = tuple(self.partial_subset)


def num_groups(channels: int) -> int:
    # at least two channels per group, so a 1x1 map still normalizes at batch size 1
    return math.gcd(min(32, max(1, channels // 2)), channels)


def conv_gn(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(num_groups(cout), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Strided conv stages C3-C5 with a top-down merge, plus P6/P7."""

    def __init__(self, base_channels: int = 32, out_channels: int = 64):
        super().__init__()
        c = base_channels
        self.stem = nn.Sequential(conv_gn(3, c, 2), conv_gn(c, c, 2))
        self.c3 = nn.Sequential(conv_gn(c, 2 * c, 2), conv_gn(2 * c, 2 * c))
        self.c4 = nn.Sequential(conv_gn(2 * c, 4 * c, 2), conv_gn(4 * c, 4 * c))
        self.c5 = conv_gn(4 * c, 4 * c, 2)
        self.lateral = nn.ModuleList(nn.Conv2d(ch, out_channels, 1) for ch in (2 * c, 4 * c, 4 * c))
        self.smooth = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in range(3))
        self.p6 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
        self.p7 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        h, w = images.shape[-2:]
        if h % STRIDES[-1] or w % STRIDES[-1]:
            raise ValueError(f"image size {h}x{w} must be divisible by {STRIDES[-1]}")
        c3 = self.c3(self.stem(images))
        c4 = self.c4(c3)
        c5 = self.c5(c4)
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, scale_factor=2, mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        p3, p4, p5 = (s(p) for s, p in zip(self.smooth, (p3, p4, p5)))
        p6 = self.p6(p5)
        p7 = self.p7(F.relu(p6))
        return [p3, p4, p5, p6, p7]


@dataclass
class LevelOutputs:
    cls_logits: torch.Tensor
    stage1_offsets: torch.Tensor
    stage2_offsets: torch.Tensor
    offset_field: torch.Tensor | None = None


class RepPointsHead(nn.Module):
    """Localization and classification subnets, shared across pyramid levels.

    Offsets are in feature-map units relative to each location.  The offset
    field built from the first point set drives both deformable convs.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.head_channels
        self.rec_feedback = config.rec_feedback
        self.loc_convs = nn.Sequential(*(conv_gn(ch, ch) for _ in range(config.stacked_convs)))
        self.cls_convs = nn.Sequential(*(conv_gn(ch, ch) for _ in range(config.stacked_convs)))
        self.pts_init = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(inplace=True),
                                      nn.Conv2d(ch, 2 * config.num_points, 1))
        self.pts_refine_dcn = DeformConv3x3(ch, ch)
        self.pts_refine_out = nn.Conv2d(ch, 2 * config.num_points, 1)
        self.cls_dcn = DeformConv3x3(ch, ch)
        self.cls_out = nn.Conv2d(ch, config.num_classes, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for dcn in (self.pts_refine_dcn, self.cls_dcn):
            nn.init.normal_(dcn.weight, std=0.01)
            nn.init.zeros_(dcn.bias)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - PRIOR_PROB) / PRIOR_PROB))
        # initial points: a 3x3 grid spanning +-INIT_SPREAD strides, the extent of the box baseline's anchor
        with torch.no_grad():
            self.pts_init[-1].bias.copy_(INIT_SPREAD * grid_template().reshape(-1))

    def forward(self, feature: torch.Tensor) -> LevelOutputs:
        loc_feat = self.loc_convs(feature)
        cls_feat = self.cls_convs(feature)
        stage1 = self.pts_init(loc_feat)
        offset_field = points_to_offset_field(stage1)
        cls_field = offset_field if self.rec_feedback else offset_field.detach()
        stage2 = self.pts_refine_out(F.relu(self.pts_refine_dcn(loc_feat, offset_field)))
        logits = self.cls_out(F.relu(self.cls_dcn(cls_feat, cls_field)))
        return LevelOutputs(logits, stage1, stage2, offset_field)


@dataclass
class FlatOutputs:
    """Head outputs of a batch flattened over all pyramid locations."""

    cls_logits: torch.Tensor  # (B, L, C)
    points1: torch.Tensor  # (B, L, n, 2)
    points2: torch.Tensor  # (B, L, n, 2)
    strides: torch.Tensor  # (L,)
    shapes: list = field(default_factory=list)
    converter: str = "minmax"
    log_multipliers: torch.Tensor | None = None
    partial_subset: tuple = DEFAULT_PARTIAL_SUBSET

    def boxes(self, stage: int) -> torch.Tensor:
        pts = self.points1 if stage == 1 else self.points2
        return convert(pts, self.converter, self.log_multipliers, self.partial_subset)


def decode_points(outputs: LevelOutputs, level: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Image-space point sets ``(B, H*W, n, 2)`` of both stages at one level.

    Stage-2 points refine detached stage-1 points.
    """
    b, ch, h, w = outputs.stage1_offsets.shape
    stride = 2 ** level
    n = ch // 2
    ys, xs = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    centers = torch.stack(((xs + 0.5) * stride, (ys + 0.5) * stride), dim=-1).reshape(1, h * w, 1, 2)
    centers = centers.to(outputs.stage1_offsets.dtype)

    def to_points(offsets):
        return offsets.reshape(b, n, 2, h * w).permute(0, 3, 1, 2) * stride

    points1 = centers + to_points(outputs.stage1_offsets)
    points2 = points1.detach() + to_points(outputs.stage2_offsets)
    return points1, points2


class RPDet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.backbone = Backbone(self.config.base_channels, self.config.head_channels)
        self.head = RepPointsHead(self.config)
        self.multipliers = MomentMultipliers()

    def forward_levels(self, images: torch.Tensor) -> list[LevelOutputs]:
        return [self.head(f) for f in self.backbone(images)]

    def forward(self, images: torch.Tensor) -> FlatOutputs:
        levels = self.forward_levels(images)
        logits, pts1, pts2, shapes = [], [], [], []
        for level, out in zip(LEVELS, levels):
            b, c, h, w = out.cls_logits.shape
            shapes.append((h, w))
            logits.append(out.cls_logits.permute(0, 2, 3, 1).reshape(b, h * w, c))
            p1, p2 = decode_points(out, level)
            pts1.append(p1)
            pts2.append(p2)
        _, strides = location_centers(shapes, images.dtype)
        return FlatOutputs(
            cls_logits=torch.cat(logits, 1),
            points1=torch.cat(pts1, 1),
            points2=torch.cat(pts2, 1),
            strides=strides,
            shapes=shapes,
            converter=self.config.converter,
            log_multipliers=self.multipliers() if self.config.converter == "moment" else None,
            partial_subset=self.config.partial_subset,
        )
