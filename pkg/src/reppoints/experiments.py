"""Toy-scale training studies: supervision ablation, box baseline, converters."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baseline import BBoxDet
from .data import Dataset, SceneDistribution, generate_dataset
from .evaluation import _iou_xywh, evaluate
from .losses import LossConfig
from .model import ModelConfig, RPDet
from .pipeline import InferConfig, TrainConfig, export_detections, infer_dataset, set_determinism, train

log = logging.getLogger(__name__)

TRAIN_SCENES = 500
HELDOUT_SCENES = 100


@dataclass
class Arm:
    name: str
    kind: str = "reppoints"  # or "bbox"
    converter: str = "minmax"
    rec_feedback: bool = True
    loc_weight_stage1: float = 0.5


ARMS = {
    "full": Arm("full"),
    "loc_only": Arm("loc_only", rec_feedback=False),
    "rec_only": Arm("rec_only", loc_weight_stage1=0.0),
    "bbox": Arm("bbox", kind="bbox"),
    "minmax": Arm("minmax"),
    "partial_minmax": Arm("partial_minmax", converter="partial_minmax"),
    "moment": Arm("moment", converter="moment"),
}


@dataclass
class Budget:
    iterations: int = 2000
    batch_size: int = 8
    train_scenes: int = TRAIN_SCENES
    heldout_scenes: int = HELDOUT_SCENES
    base_channels: int = 32
    head_channels: int = 64
    data_seed: int = 0

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                           lr_steps=(int(self.iterations * 0.75),), seed=seed, log_every=0)


@dataclass
class ArmResult:
    arm: str
    seed: int
    AP: float
    AP50: float
    AP75: float
    seconds: float
    points_inside_rate: float | None = None
    extra: dict = field(default_factory=dict)


def toy_split(budget: Budget, dist: SceneDistribution | None = None) -> tuple[Dataset, Dataset]:
    train_set = generate_dataset(budget.train_scenes, budget.data_seed, dist)
    heldout = generate_dataset(budget.heldout_scenes, budget.data_seed, dist, first_id=budget.train_scenes)
    return train_set, heldout


def build_model(arm: Arm, budget: Budget, num_classes: int = 3):
    cfg = ModelConfig(num_classes=num_classes, base_channels=budget.base_channels,
                      head_channels=budget.head_channels, converter=arm.converter, rec_feedback=arm.rec_feedback)
    return BBoxDet(cfg) if arm.kind == "bbox" else RPDet(cfg)


def match_true_positives(detections, dataset: Dataset, threshold: float = 0.5) -> list[tuple]:
    """(detection, matched GT box) pairs from greedy score-ordered matching per image and class."""
    by_image = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    pairs = []
    for image_id, boxes, labels in zip(dataset.image_ids, dataset.boxes, dataset.labels):
        dets = sorted(by_image.get(image_id, []), key=lambda d: -d.score)
        used = set()
        for d in dets:
            cand = [g for g in range(len(boxes)) if labels[g] == d.class_id and g not in used]
            if not cand:
                continue
            x0, y0, x1, y1 = d.box
            gt = np.array([[b[0], b[1], b[2] - b[0], b[3] - b[1]] for b in boxes[cand]])
            ious = _iou_xywh(np.array([[x0, y0, x1 - x0, y1 - y0]]), gt)[0]
            k = int(np.argmax(ious))
            if ious[k] >= threshold:
                used.add(cand[k])
                pairs.append((d, boxes[cand[k]]))
    return pairs


def points_inside_rate(detections, dataset: Dataset, dilation: float = 0.10) -> float:
    """Fraction of true positives whose final points all lie in the GT box scaled by ``1 + dilation``."""
    pairs = [(d, g) for d, g in match_true_positives(detections, dataset) if d.points is not None]
    if not pairs:
        return 0.0
    inside = 0
    for d, g in pairs:
        cx, cy = (g[0] + g[2]) / 2, (g[1] + g[3]) / 2
        hw, hh = (g[2] - g[0]) * (1 + dilation) / 2, (g[3] - g[1]) * (1 + dilation) / 2
        p = d.points
        inside += bool(((np.abs(p[:, 0] - cx) <= hw) & (np.abs(p[:, 1] - cy) <= hh)).all())
    return inside / len(pairs)


def run_arm(arm: Arm | str, seed: int, budget: Budget | None = None, data=None, out_dir=None) -> ArmResult:
    """Train one configuration on the toy split and score it on the held-out scenes."""
    arm = ARMS[arm] if isinstance(arm, str) else arm
    budget = budget or Budget()
    train_set, heldout = data if data is not None else toy_split(budget)
    set_determinism(seed)
    model = build_model(arm, budget)
    loss_cfg = LossConfig(loc_weight_stage1=arm.loc_weight_stage1)
    start = time.perf_counter()
    train(model, train_set, budget.train_config(seed), loss_cfg, out_dir=out_dir,
          config_snapshot={"arm": asdict(arm), "budget": asdict(budget), "seed": seed})
    dets = infer_dataset(model, heldout, InferConfig())
    res = evaluate(export_detections(dets), heldout.coco())
    elapsed = time.perf_counter() - start
    inside = points_inside_rate(dets, heldout) if arm.kind == "reppoints" else None
    log.info("arm %s seed %d: AP %.4f AP50 %.4f AP75 %.4f (%.0fs)", arm.name, seed, res.AP, res.AP50, res.AP75,
             elapsed)
    return ArmResult(arm.name, seed, res.AP, res.AP50, res.AP75, elapsed, inside,
                     extra={"model": model, "detections": dets})


def mean_ap(results: list[ArmResult]) -> float:
    return float(np.mean([r.AP for r in results]))


def quick_budget(**overrides) -> Budget:
    """Narrower network on the same schedule, used for the multi-seed arm comparisons."""
    return replace(Budget(head_channels=32, base_channels=16), **overrides)


__all__ = ["ARMS", "Arm", "ArmResult", "Budget", "mean_ap", "points_inside_rate", "quick_budget", "run_arm",
           "toy_split"]
