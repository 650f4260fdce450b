"""Synthetic rendered-shapes scenes with COCO-style annotations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CLASSES = ("rectangle", "ellipse", "triangle")
SUPERSAMPLE = 4


@dataclass
class SceneDistribution:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 12
    max_size: int = 64
    max_aspect: float = 2.5
    min_gap: int = 2
    noise_std: float = 0.03
    min_contrast: float = 0.35
    max_tries: int = 200

    def validate(self):
        if self.min_size < 1 or self.max_size < self.min_size:
            raise ValueError("need 1 <= min_size <= max_size")
        if self.max_size > self.image_size:
            raise ValueError(f"objects up to {self.max_size}px do not fit a {self.image_size}px image")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (k, 4) float64 corners
    labels: np.ndarray  # (k,) int64 class ids
    seed: int


def _coverage(mask_fn, box, size: int) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Fractional pixel coverage of a shape, computed on a supersampled grid."""
    x0, y0, x1, y1 = box
    c0, r0 = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
    c1, r1 = min(int(np.ceil(x1)), size), min(int(np.ceil(y1)), size)
    s = SUPERSAMPLE
    xs = c0 + (np.arange((c1 - c0) * s) + 0.5) / s
    ys = r0 + (np.arange((r1 - r0) * s) + 0.5) / s
    gx, gy = np.meshgrid(xs, ys)
    inside = mask_fn(gx, gy).astype(np.float64)
    cov = inside.reshape(r1 - r0, s, c1 - c0, s).mean(axis=(1, 3))
    return cov, (slice(r0, r1), slice(c0, c1))


def shape_mask(kind: str, box, apex: float = 0.5, flip: bool = False):
    x0, y0, x1, y1 = box
    if kind == "rectangle":
        return lambda x, y: (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    if kind == "ellipse":
        cx, cy, rx, ry = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
        return lambda x, y: ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0
    if kind == "triangle":
        top, base = (y1, y0) if flip else (y0, y1)
        ax = x0 + apex * (x1 - x0)
        verts = np.array([[ax, top], [x0, base], [x1, base]])

        def mask(x, y):
            # same-side test against the three edges
            signs = []
            for (px, py), (qx, qy) in zip(verts, np.roll(verts, -1, axis=0)):
                signs.append((qx - px) * (y - py) - (qy - py) * (x - px))
            s = np.stack(signs)
            return (s >= 0).all(axis=0) | (s <= 0).all(axis=0)

        return mask
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(image: np.ndarray, kind: str, box, color, apex: float = 0.5, flip: bool = False) -> None:
    """Alpha-composite one anti-aliased shape into a float image in place."""
    cov, (rs, cs) = _coverage(shape_mask(kind, box, apex, flip), box, image.shape[0])
    patch = image[rs, cs]
    image[rs, cs] = patch * (1 - cov[..., None]) + np.asarray(color)[None, None, :] * cov[..., None]


def _separated(box, others, gap: float) -> bool:
    for o in others:
        if box[0] < o[2] + gap and o[0] < box[2] + gap and box[1] < o[3] + gap and o[1] < box[3] + gap:
            return False
    return True


def generate_scene(seed: int, dist: SceneDistribution | None = None) -> Scene:
    dist = dist or SceneDistribution()
    dist.validate()
    rng = np.random.default_rng(seed)
    size = dist.image_size
    background = rng.uniform(0, 1, 3)
    image = np.broadcast_to(background, (size, size, 3)).copy()
    boxes, labels = [], []
    count = int(rng.integers(dist.min_objects, dist.max_objects + 1))
    for _ in range(count):
        for _try in range(dist.max_tries):
            w = int(rng.integers(dist.min_size, dist.max_size + 1))
            h = int(rng.integers(dist.min_size, dist.max_size + 1))
            if max(w / h, h / w) > dist.max_aspect:
                continue
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if _separated(box, boxes, dist.min_gap):
                break
        else:
            continue
        kind = int(rng.integers(len(CLASSES)))
        while True:
            color = rng.uniform(0, 1, 3)
            if np.linalg.norm(color - background) >= dist.min_contrast:
                break
        render_shape(image, CLASSES[kind], box, color, apex=float(rng.uniform(0, 1)), flip=bool(rng.integers(2)))
        boxes.append(box)
        labels.append(kind)
    if dist.min_objects and not boxes:
        raise ValueError("could not place any object; loosen the distribution")
    image = image + rng.normal(0, dist.noise_std, image.shape)
    image = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    return Scene(image, np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64), seed)


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    boxes: list
    labels: list
    image_ids: list

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.images[indices], [self.boxes[i] for i in indices],
                       [self.labels[i] for i in indices], [self.image_ids[i] for i in indices])

    def coco(self) -> dict:
        return to_coco(self)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(num_scenes: int, seed: int = 0, dist: SceneDistribution | None = None,
                     first_id: int = 0) -> Dataset:
    """Deterministic scenes; scene ``i`` depends only on ``(seed, first_id + i)``."""
    if num_scenes <= 0:
        raise ValueError("num_scenes must be positive")
    dist = dist or SceneDistribution()
    dist.validate()
    scenes = [generate_scene(scene_seed(seed, first_id + i), dist) for i in range(num_scenes)]
    return Dataset(
        images=np.stack([s.image for s in scenes]),
        boxes=[s.boxes for s in scenes],
        labels=[s.labels for s in scenes],
        image_ids=list(range(first_id, first_id + num_scenes)),
    )


def to_coco(dataset: Dataset) -> dict:
    h, w = dataset.images.shape[1:3]
    images, annotations = [], []
    ann_id = 1
    for image_id, boxes, labels in zip(dataset.image_ids, dataset.boxes, dataset.labels):
        images.append({"id": int(image_id), "file_name": f"{int(image_id):06d}.png", "width": int(w), "height": int(h)})
        for box, label in zip(boxes, labels):
            x0, y0, x1, y1 = (float(v) for v in box)
            annotations.append({
                "id": ann_id, "image_id": int(image_id), "category_id": int(label),
                "bbox": [x0, y0, x1 - x0, y1 - y0], "area": (x1 - x0) * (y1 - y0), "iscrowd": 0,
            })
            ann_id += 1
    categories = [{"id": i, "name": name} for i, name in enumerate(CLASSES)]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_dataset(dataset: Dataset, out_dir, dist: SceneDistribution | None = None, seed: int | None = None) -> Path:
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    coco = to_coco(dataset)
    for entry, image in zip(coco["images"], dataset.images):
        Image.fromarray(image).save(out / "images" / entry["file_name"], optimize=False)
    if dist is not None:
        coco["info"] = {"generator": asdict(dist), "seed": seed}
    (out / "annotations.json").write_text(json.dumps(coco, indent=1, sort_keys=True))
    return out


def annotations_by_image(coco: dict) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    per_image = {int(img["id"]): ([], []) for img in coco["images"]}
    for ann in coco["annotations"]:
        x, y, w, h = ann["bbox"]
        per_image.setdefault(int(ann["image_id"]), ([], []))
        per_image[int(ann["image_id"])][0].append([x, y, x + w, y + h])
        per_image[int(ann["image_id"])][1].append(int(ann["category_id"]))
    return {k: (np.asarray(b, dtype=np.float64).reshape(-1, 4), np.asarray(l, dtype=np.int64))
            for k, (b, l) in per_image.items()}


def load_dataset(data_dir) -> Dataset:
    from PIL import Image

    root = Path(data_dir)
    coco = json.loads((root / "annotations.json").read_text())
    per_image = annotations_by_image(coco)
    entries = sorted(coco["images"], key=lambda e: e["id"])
    images = np.stack([np.asarray(Image.open(root / "images" / e["file_name"]).convert("RGB")) for e in entries])
    ids = [int(e["id"]) for e in entries]
    return Dataset(images, [per_image[i][0] for i in ids], [per_image[i][1] for i in ids], ids)
