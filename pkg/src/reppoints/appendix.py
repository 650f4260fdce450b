"""Deformable RoI pooling and the translation-sensitivity study.

The study trains two small localizers on single-object scenes:

* a deformable-RoI-pool regressor that maps a jittered box proposal to
  box-regression deltas, and
* a point-set localizer that regresses 9 points from a jittered center
  hypothesis and is supervised only through its pseudo box.  The moment
  converter is the default here because it reaches every point; min-max
  would leave the interior points where they were initialized.

It then asks where the learned sample points end up.  For the pooling
regressor they travel with the proposal; for the point-set localizer they
settle on the object no matter where the hypothesis started.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SceneDistribution, generate_dataset
from .deform import bilinear_sample_batch, grid_template
from .geometry import CONVERTERS, MomentMultipliers, bbox_regression_target, convert, iou_matrix, pseudo_box_minmax
from .losses import corner_distance_loss, smooth_l1
from .pipeline import TrainingDiverged, images_to_tensor

log = logging.getLogger(__name__)

GRID = 3
DELTA_STDS = (0.1, 0.1, 0.2, 0.2)


@dataclass
class DeformablePoolConfig:
    grid: int = GRID
    channels: int = 32
    hidden: int = 128
    offset_gain: float = 0.1  # predicted offsets are multiplied by this before scaling by proposal size
    jitter: float = 0.25  # max shift of a hypothesis, as a fraction of the object's width / height
    image_size: int = 64
    min_size: int = 16
    max_size: int = 40
    train_scenes: int = 256
    test_scenes: int = 32
    hypotheses: int = 8
    iterations: int = 600
    batch_size: int = 16
    lr: float = 2e-3
    point_scale: float = 8.0  # pixels per unit of predicted point offset
    converter: str = "moment"

    def __post_init__(self):
        if self.grid != GRID:
            raise ValueError("the pooling grid is fixed at 3x3")
        if not 0 < self.jitter < 0.5:
            raise ValueError("jitter must be in (0, 0.5)")
        if self.converter not in CONVERTERS:
            raise ValueError(f"unknown converter {self.converter!r}")

    def scene_distribution(self) -> SceneDistribution:
        return SceneDistribution(image_size=self.image_size, min_objects=1, max_objects=1,
                                 min_size=self.min_size, max_size=self.max_size)


# --- pooling ---------------------------------------------------------------

def roi_grid(proposals: torch.Tensor) -> torch.Tensor:
    """Cell centers of the 3x3 RoIAlign grid, ``(..., 9, 2)`` in image coordinates, row-major."""
    x0, y0, x1, y1 = proposals.unbind(-1)
    frac = (torch.arange(GRID, dtype=proposals.dtype) + 0.5) / GRID
    gy, gx = torch.meshgrid(frac, frac, indexing="ij")
    gx, gy = gx.reshape(-1), gy.reshape(-1)
    xs = x0.unsqueeze(-1) + gx * (x1 - x0).unsqueeze(-1)
    ys = y0.unsqueeze(-1) + gy * (y1 - y0).unsqueeze(-1)
    return torch.stack((xs, ys), dim=-1)


def _check_proposals(proposals: torch.Tensor) -> None:
    if proposals.shape[-1] != 4:
        raise ValueError("proposals must have 4 coordinates")
    if not torch.isfinite(proposals).all():
        raise ValueError("proposals must be finite")
    if ((proposals[..., 2] <= proposals[..., 0]) | (proposals[..., 3] <= proposals[..., 1])).any():
        raise ValueError("degenerate proposal")


def sample_at(features: torch.Tensor, points: torch.Tensor, stride: float) -> torch.Tensor:
    """Features (B, C, H, W) at image-space points (B, ..., 2); returns (B, ..., C)."""
    x = points[..., 0] / stride - 0.5
    y = points[..., 1] / stride - 0.5
    out = bilinear_sample_batch(features, x, y)
    return out.movedim(1, -1)


def deformable_roi_pool(features: torch.Tensor, proposals: torch.Tensor,
                        offset_predictor: Callable | None = None, stride: float = 1.0):
    """Pool a 3x3 grid per proposal after moving each cell by a predicted offset.

    ``features`` is (B, C, H, W), ``proposals`` (B, K, 4).  The predictor maps
    the regular-grid features (B, K, 9, C) to normalized offsets (B, K, 9, 2)
    that are scaled by the proposal's width and height.  Returns the pooled
    features (B, K, 9, C) and the absolute sample points (B, K, 9, 2).
    """
    _check_proposals(proposals)
    grid = roi_grid(proposals)
    if offset_predictor is None:
        return sample_at(features, grid, stride), grid
    regular = sample_at(features, grid, stride)
    offsets = offset_predictor(regular)
    size = torch.stack((proposals[..., 2] - proposals[..., 0], proposals[..., 3] - proposals[..., 1]), dim=-1)
    points = grid + offsets * size.unsqueeze(-2)
    return sample_at(features, points, stride), points


def roi_align_3x3(features: torch.Tensor, proposals: torch.Tensor, stride: float = 1.0) -> torch.Tensor:
    """Reference 3x3 RoIAlign with one sample per cell, through ``F.grid_sample``.

    Returns (B, K, 9, C).
    """
    _check_proposals(proposals)
    b, c, h, w = features.shape
    x0, y0, x1, y1 = proposals.unbind(-1)
    cells = []
    for i in range(GRID):
        for j in range(GRID):
            cx = x0 + (j + 0.5) * (x1 - x0) / GRID
            cy = y0 + (i + 0.5) * (y1 - y0) / GRID
            cells.append(torch.stack((cx, cy), dim=-1))
    pts = torch.stack(cells, dim=-2) / stride  # (B, K, 9, 2) in feature pixels (edges at integers)
    norm = torch.stack((pts[..., 0] * 2 / w - 1, pts[..., 1] * 2 / h - 1), dim=-1)
    out = F.grid_sample(features, norm, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.permute(0, 2, 3, 1)


# --- models ----------------------------------------------------------------

class Encoder(nn.Module):
    """Stride-4 conv stack with dilations wide enough to see a whole object from a shifted center."""

    stride = 4

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        plan = [(3, c, 1, 1), (c, c, 2, 1), (c, c, 1, 1), (c, c, 2, 1), (c, c, 1, 1), (c, c, 1, 2), (c, c, 1, 4)]
        layers = []
        for cin, cout, s, d in plan:
            layers += [nn.Conv2d(cin, cout, 3, stride=s, padding=d, dilation=d), nn.GroupNorm(8, cout), nn.ReLU()]
        self.body = nn.Sequential(*layers)

    def forward(self, images):
        return self.body(images)


class DPoolRegressor(nn.Module):
    def __init__(self, cfg: DeformablePoolConfig):
        super().__init__()
        self.encoder = Encoder(cfg.channels)
        n = GRID * GRID * cfg.channels
        self.offset_fc = nn.Sequential(nn.Linear(n, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, 2 * GRID * GRID))
        nn.init.zeros_(self.offset_fc[-1].weight)
        nn.init.zeros_(self.offset_fc[-1].bias)
        self.head = nn.Sequential(nn.Linear(n, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, 4))
        self.gain = cfg.offset_gain

    def predict_offsets(self, regular: torch.Tensor) -> torch.Tensor:
        flat = regular.flatten(-2)
        return self.gain * self.offset_fc(flat).reshape(*regular.shape[:-2], GRID * GRID, 2)

    def forward(self, images, proposals):
        feats = self.encoder(images)
        pooled, points = deformable_roi_pool(feats, proposals, self.predict_offsets, Encoder.stride)
        return self.head(pooled.flatten(-2)), pooled, points


class PointLocalizer(nn.Module):
    """Nine points regressed from features on a fixed 3x3 neighbourhood of a center hypothesis."""

    def __init__(self, cfg: DeformablePoolConfig):
        super().__init__()
        self.encoder = Encoder(cfg.channels)
        n = GRID * GRID * cfg.channels
        self.fc = nn.Sequential(nn.Linear(n, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(),
                                nn.Linear(cfg.hidden, 18))
        nn.init.normal_(self.fc[-1].weight, std=0.01)
        with torch.no_grad():
            self.fc[-1].bias.copy_(grid_template().reshape(-1))
        self.scale = cfg.point_scale
        self.converter = cfg.converter
        self.multipliers = MomentMultipliers()

    def pseudo_boxes(self, points):
        lam = self.multipliers() if self.converter == "moment" else None
        return convert(points, self.converter, lam)

    def forward(self, images, centers):
        feats = self.encoder(images)
        probe = centers.unsqueeze(-2) + self.scale * grid_template(centers.dtype)
        local = sample_at(feats, probe, Encoder.stride)
        offsets = self.fc(local.flatten(-2)).reshape(*centers.shape[:-1], 9, 2)
        points = centers.unsqueeze(-2) + self.scale * offsets
        return points, sample_at(feats, points, Encoder.stride)


# --- study -----------------------------------------------------------------

def jitter_boxes(gt: np.ndarray, rng: np.random.Generator, k: int, jitter: float) -> np.ndarray:
    """``k`` translated copies of each GT box; returns shifts (N, k, 2) in pixels."""
    size = np.stack((gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]), axis=-1)
    return rng.uniform(-jitter, jitter, (len(gt), k, 2)) * size[:, None, :]


def _split(cfg: DeformablePoolConfig, seed: int):
    dist = cfg.scene_distribution()
    train_set = generate_dataset(cfg.train_scenes, seed, dist)
    test_set = generate_dataset(cfg.test_scenes, seed, dist, first_id=cfg.train_scenes)
    def pack(ds):
        return images_to_tensor(ds.images), np.stack([b[0] for b in ds.boxes])
    return pack(train_set), pack(test_set), test_set


def _hypotheses(gt: np.ndarray, shifts: np.ndarray):
    centers = np.stack(((gt[:, 0] + gt[:, 2]) / 2, (gt[:, 1] + gt[:, 3]) / 2), axis=-1)[:, None] + shifts
    proposals = np.concatenate([gt[:, None, :2] + shifts, gt[:, None, 2:] + shifts], axis=-1)
    return torch.as_tensor(centers, dtype=torch.float32), torch.as_tensor(proposals, dtype=torch.float32)


def _train(model, step_loss, cfg, images, gt, rng, name):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [int(cfg.iterations * 0.75)], 0.1)
    model.train()
    for it in range(cfg.iterations):
        idx = rng.choice(len(gt), cfg.batch_size, replace=False)
        shifts = jitter_boxes(gt[idx], rng, 4, cfg.jitter)
        loss = step_loss(images[idx], gt[idx], shifts)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{name} loss became {float(loss)} at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    model.eval()
    return float(loss.detach())


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.reshape(-1) - a.mean()
    b = b.reshape(-1) - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of ``y`` on ``x``: how far points travel per unit of jitter."""
    x = x.reshape(-1) - x.mean()
    y = y.reshape(-1) - y.mean()
    return float((x * y).sum() / (x * x).sum())


def _pairwise(values: np.ndarray, fn) -> np.ndarray:
    k = values.shape[0]
    return np.array([fn(values[i], values[j]) for i in range(k) for j in range(i + 1, k)])


def run_translation_sensitivity_study(seed: int = 0, cfg: DeformablePoolConfig | None = None, out_dir=None) -> dict:
    """Train both localizers and measure how their sample points respond to hypothesis jitter."""
    cfg = cfg or DeformablePoolConfig()
    start = time.perf_counter()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    (train_images, train_gt), (test_images, test_gt), test_set = _split(cfg, seed)
    stds = torch.tensor(DELTA_STDS)

    dpool = DPoolRegressor(cfg)

    def dpool_loss(images, gt, shifts):
        _, proposals = _hypotheses(gt, shifts)
        deltas, _, _ = dpool(images, proposals)
        target = bbox_regression_target(proposals, torch.as_tensor(gt, dtype=torch.float32)[:, None]) / stds
        return smooth_l1(deltas - target, 1.0 / 9.0).sum(-1).mean()

    points_model = PointLocalizer(cfg)

    def points_loss(images, gt, shifts):
        centers, _ = _hypotheses(gt, shifts)
        points, _ = points_model(images, centers)
        target = torch.as_tensor(gt, dtype=torch.float32)[:, None].expand(-1, shifts.shape[1], 4)
        return corner_distance_loss(points_model.pseudo_boxes(points), target, cfg.point_scale, 1.0 / 9.0).mean()

    final_dpool = _train(dpool, dpool_loss, cfg, train_images, train_gt, rng, "deformable pooling")
    final_points = _train(points_model, points_loss, cfg, train_images, train_gt, rng, "point localizer")

    shifts = jitter_boxes(test_gt, rng, cfg.hypotheses, cfg.jitter)
    centers, proposals = _hypotheses(test_gt, shifts)
    with torch.no_grad():
        deltas, pooled, dpool_points = dpool(test_images, proposals)
        rep_points, rep_feats = points_model(test_images, centers)
        pseudo = points_model.pseudo_boxes(rep_points).double()
    size = np.stack((test_gt[:, 2] - test_gt[:, 0], test_gt[:, 3] - test_gt[:, 1]), axis=-1)[:, None]
    gt_center = np.stack(((test_gt[:, 0] + test_gt[:, 2]) / 2, (test_gt[:, 1] + test_gt[:, 3]) / 2), axis=-1)[:, None]
    rel_jitter = shifts / size
    dpool_disp = (dpool_points.mean(-2).numpy() - gt_center) / size
    rep_disp = (rep_points.mean(-2).numpy() - gt_center) / size
    extent = pseudo_box_minmax(rep_points)
    extent_disp = (((extent[..., :2] + extent[..., 2:]) / 2).numpy() - gt_center) / size
    ious = [_pairwise(np.arange(cfg.hypotheses), lambda i, j, b=b: float(iou_matrix(b[i:i + 1], b[j:j + 1])[0, 0]))
            for b in pseudo]
    feat_dist = np.concatenate([_pairwise(p.flatten(-2).numpy(), lambda u, v: float(np.linalg.norm(u - v)))
                                for p in pooled])
    rep_dist = np.concatenate([_pairwise(p.flatten(-2).numpy(), lambda u, v: float(np.linalg.norm(u - v)))
                               for p in rep_feats])
    dpool_gt = bbox_regression_target(proposals, torch.as_tensor(test_gt, dtype=torch.float32)[:, None]) / stds
    report = {
        "seed": seed,
        "config": asdict(cfg),
        "dpool_jitter_correlation": _pearson(rel_jitter, dpool_disp),
        "reppoints_jitter_correlation": _pearson(rel_jitter, rep_disp),
        "reppoints_extent_jitter_correlation": _pearson(rel_jitter, extent_disp),
        "dpool_jitter_slope": _slope(rel_jitter, dpool_disp),
        "reppoints_jitter_slope": _slope(rel_jitter, rep_disp),
        "reppoints_extent_jitter_slope": _slope(rel_jitter, extent_disp),
        "reppoints_pairwise_iou": float(np.mean(np.concatenate(ious))),
        "reppoints_pairwise_iou_min": float(np.min(np.concatenate(ious))),
        "dpool_feature_distance_mean": float(feat_dist.mean()),
        "dpool_feature_distance_min": float(feat_dist.min()),
        "reppoints_feature_distance_mean": float(rep_dist.mean()),
        "dpool_regression_error": float((deltas - dpool_gt).abs().mean()),
        "final_train_loss": {"dpool": final_dpool, "reppoints": final_points},
    }
    report["seconds"] = time.perf_counter() - start
    log.info("dpool corr %.3f, reppoints corr %.3f, reppoints IoU %.3f", report["dpool_jitter_correlation"],
             report["reppoints_jitter_correlation"], report["reppoints_pairwise_iou"])
    if out_dir is not None:
        write_study_artifacts(report, test_set, proposals, dpool_points, centers, rep_points, pseudo, out_dir)
    return report


def write_study_artifacts(report, test_set, proposals, dpool_points, centers, rep_points, pseudo, out_dir,
                          panels: int = 4, shown: int = 3) -> Path:
    from .plotting import render_study_panel

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in report.items() if k != "seconds"}
    (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    for i in range(min(panels, len(test_set))):
        image, gt = test_set.images[i], test_set.boxes[i][0]
        render_study_panel(image, proposals[i, :shown].numpy(), dpool_points[i, :shown].numpy(),
                           out / f"dpool_{i:02d}.png", gt, "deformable RoI pooling")
        render_study_panel(image, pseudo[i, :shown].numpy(), rep_points[i, :shown].numpy(),
                           out / f"reppoints_{i:02d}.png", gt, "RepPoints")
    return out
