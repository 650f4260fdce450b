"""Training loop, inference, NMS and checkpoint I/O."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .assignment import assign, assign_classification, assign_stage1, assign_stage2
from .data import Dataset
from .geometry import iou_matrix
from .losses import LossConfig, total_loss

log = logging.getLogger(__name__)

ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple = (1500,)
    lr_gamma: float = 0.1
    warmup_iters: int = 100
    grad_clip: float = 10.0
    flip: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ValueError("iterations and batch_size must be positive")


@dataclass
class Detection:
    image_id: int
    class_id: int
    score: float
    box: tuple
    points: np.ndarray | None = field(default=None, repr=False)
    points_stage1: np.ndarray | None = field(default=None, repr=False)

    def coco(self) -> dict:
        x0, y0, x1, y1 = self.box
        return {"image_id": int(self.image_id), "category_id": int(self.class_id),
                "bbox": [x0, y0, x1 - x0, y1 - y0], "score": self.score}


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 ``(B, H, W, 3)`` to a normalized float ``(B, 3, H, W)`` tensor."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return (x / 255.0 - 0.5) / 0.25


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# --- NMS -------------------------------------------------------------------

def nms(boxes, scores, class_ids, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy per-class hard NMS; returns kept indices in priority order.

    Priority is score descending, then index ascending.  A box is dropped when
    its IoU with an already kept box of the same class exceeds the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    class_ids = np.asarray(class_ids).reshape(-1)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    order = np.lexsort((np.arange(len(scores)), -scores))
    if len(order) == 0:
        return order
    ious = iou_matrix(torch.from_numpy(boxes), torch.from_numpy(boxes)).numpy()
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (ious[i] > iou_threshold) & (class_ids == class_ids[i])
    return np.asarray(keep, dtype=np.int64)


def nms_detections(detections: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    if not detections:
        return []
    keep = nms([d.box for d in detections], [d.score for d in detections],
               [d.class_id for d in detections], iou_threshold)
    return [detections[i] for i in keep]


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: torch.nn.Module, config: dict) -> Path:
    """Named float arrays plus a JSON config snapshot in one zip archive.

    Entries carry a fixed timestamp so identical weights give identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH), buf.getvalue())
        zf.writestr(zipfile.ZipInfo("config.json", date_time=ZIP_EPOCH),
                    json.dumps(config, sort_keys=True, indent=1))
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    arrays, config = {}, {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if name == "config.json":
                config = json.loads(zf.read(name))
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, config


def load_weights(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> torch.nn.Module:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model


# --- training --------------------------------------------------------------

def detector_loss(model, images: torch.Tensor, gt_boxes: list, gt_labels: list, loss_config: LossConfig):
    """Forward pass, target assignment and loss for a point-set detector."""
    outputs = model(images)
    boxes1 = outputs.boxes(1).detach()
    h, w = images.shape[-2:]
    assignments = [
        assign(torch.as_tensor(b, dtype=torch.float64), l, boxes1[i], outputs.shapes, (h, w))
        for i, (b, l) in enumerate(zip(gt_boxes, gt_labels))
    ]
    gts = [torch.as_tensor(b, dtype=torch.float32) for b in gt_boxes]
    return total_loss(outputs, assignments, gts, loss_config)


def lr_at(it: int, cfg: TrainConfig) -> float:
    lr = cfg.lr * cfg.lr_gamma ** sum(it >= s for s in cfg.lr_steps)
    if it < cfg.warmup_iters:
        lr *= 0.1 + 0.9 * it / cfg.warmup_iters
    return lr


def _flip(images: np.ndarray, boxes: list) -> tuple[np.ndarray, list]:
    w = images.shape[2]
    return images[:, :, ::-1], [np.stack((w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]), axis=1) for b in boxes]


def batches(dataset: Dataset, cfg: TrainConfig):
    """Endless reproducible stream of (images, boxes, labels) batches."""
    rng = np.random.default_rng(cfg.seed)
    order = np.empty(0, dtype=np.int64)
    while True:
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        images = dataset.images[idx]
        boxes = [dataset.boxes[i].copy() for i in idx]
        labels = [dataset.labels[i] for i in idx]
        if cfg.flip:
            flips = rng.random(len(idx)) < 0.5
            for j in np.nonzero(flips)[0]:
                im, bx = _flip(images[j:j + 1], [boxes[j]])
                images = images.copy()
                images[j] = im[0]
                boxes[j] = bx[0]
        yield images, boxes, labels


def format_log_line(it: int, terms: dict) -> str:
    return f"{it}, {terms['total']:.8f}, {terms['cls']:.8f}, {terms['loc1']:.8f}, {terms['loc2']:.8f}"


def train(model, dataset: Dataset, cfg: TrainConfig, loss_config: LossConfig | None = None,
          out_dir=None, config_snapshot: dict | None = None,
          loss_fn: Callable | None = None) -> list[str]:
    """SGD with momentum; returns the metric log lines.

    With ``out_dir`` set, the log goes to ``metrics.log`` and checkpoints to
    ``checkpoint_<iter>.npz`` / ``checkpoint_final.npz``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    loss_config = loss_config or LossConfig()
    loss_fn = loss_fn or getattr(model, "detector_loss", detector_loss)
    snapshot = config_snapshot or {"train": asdict(cfg), "loss": asdict(loss_config)}
    params = [p for p in model.parameters() if p.requires_grad]
    decay = [p for p in params if p.ndim > 1]
    no_decay = [p for p in params if p.ndim <= 1]
    opt = torch.optim.SGD([{"params": decay, "weight_decay": cfg.weight_decay},
                           {"params": no_decay, "weight_decay": 0.0}], lr=cfg.lr, momentum=cfg.momentum)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.log", "w")
    lines = []
    stream = batches(dataset, cfg)
    model.train()
    try:
        for it in range(cfg.iterations):
            images, boxes, labels = next(stream)
            for g in opt.param_groups:
                g["lr"] = lr_at(it, cfg)
            loss, terms = loss_fn(model, images_to_tensor(images), boxes, labels, loss_config)
            if not math.isfinite(terms["total"]):
                raise TrainingDiverged(f"non-finite loss at iteration {it}: {terms}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            line = format_log_line(it, terms)
            lines.append(line)
            if log_file:
                log_file.write(line + "\n")
            if cfg.log_every and it % cfg.log_every == 0:
                log.info(line)
            if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{it + 1:06d}.npz", model, snapshot)
    finally:
        if log_file:
            log_file.close()
    if out is not None:
        save_checkpoint(out / "checkpoint_final.npz", model, snapshot)
    model.eval()
    return lines


# --- inference -------------------------------------------------------------

@dataclass
class InferConfig:
    score_thresh: float = 0.05
    topk_per_level: int = 100
    nms_thresh: float = 0.5
    max_per_image: int = 100


def check_parameters(model) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"parameter {name} contains non-finite values")


@torch.no_grad()
def infer(model, images: np.ndarray, cfg: InferConfig | None = None, image_ids=None) -> list[list[Detection]]:
    """Detections for a batch of uint8 images, one list per image.

    Each level contributes its top-k (location, class) pairs above the score
    threshold; boxes are the converter applied to the final point sets, or
    the refined boxes for the box baseline.
    """
    cfg = cfg or InferConfig()
    check_parameters(model)
    model.eval()
    if image_ids is None:
        image_ids = list(range(len(images)))
    outputs = model(images_to_tensor(images))
    scores = torch.sigmoid(outputs.cls_logits)
    boxes = outputs.boxes(2)
    points = getattr(outputs, "points2", None)
    points1 = getattr(outputs, "points1", None)
    num_classes = scores.shape[-1]
    starts = np.cumsum([0] + [h * w for h, w in outputs.shapes])
    results = []
    for b in range(scores.shape[0]):
        dets = []
        for lo, hi in zip(starts[:-1], starts[1:]):
            flat = scores[b, lo:hi].reshape(-1)
            cand = (flat > cfg.score_thresh).nonzero().flatten()
            if cand.numel() == 0:
                continue
            vals = flat[cand]
            order = torch.sort(vals, descending=True, stable=True).indices[:cfg.topk_per_level]
            for k in cand[order].tolist():
                loc, cls = lo + k // num_classes, k % num_classes
                box = tuple(float(v) for v in boxes[b, loc])
                pts = points[b, loc].numpy().copy() if points is not None else None
                pts1 = points1[b, loc].numpy().copy() if points1 is not None else None
                dets.append(Detection(int(image_ids[b]), int(cls), float(flat[k]), box, pts, pts1))
        dets = nms_detections(dets, cfg.nms_thresh)[:cfg.max_per_image]
        results.append(dets)
    return results


def infer_dataset(model, dataset: Dataset, cfg: InferConfig | None = None, batch_size: int = 16) -> list[Detection]:
    dets = []
    for s in range(0, len(dataset), batch_size):
        for per_image in infer(model, dataset.images[s:s + batch_size], cfg, dataset.image_ids[s:s + batch_size]):
            dets.extend(per_image)
    return dets


def export_detections(detections: list[Detection], path=None) -> list[dict]:
    records = [d.coco() for d in detections]
    if path is not None:
        Path(path).write_text(json.dumps(records, indent=1))
    return records


__all__ = [
    "Detection", "InferConfig", "TrainConfig", "TrainingDiverged", "assign_classification", "assign_stage1",
    "assign_stage2", "detector_loss", "export_detections", "infer", "infer_dataset", "nms", "read_checkpoint",
    "save_checkpoint", "train",
]
