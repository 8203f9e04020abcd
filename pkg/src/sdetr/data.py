"""Synthetic shape-detection benchmark: filled circles, squares, triangles.

Scenes are a pure function of (seed, index). Shapes are rendered with 4x4
supersampled coverage for anti-aliased edges; each class has a stable base
color with per-object jitter so the desk-scale backbone can learn it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, FormatError

_CLASS_COLORS = np.array([
    [0.85, 0.25, 0.25],   # circle
    [0.25, 0.80, 0.30],   # square
    [0.30, 0.40, 0.90],   # triangle
])
_BACKGROUND = 0.12
_SUBSAMPLES = 4


@dataclass
class SceneConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 0.15
    max_size: float = 0.40
    noise: float = 0.05
    distractors: int = 4  # max unlabeled background strokes per scene
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(_CLASS_COLORS):
            raise ContractError(f"num_classes must be 1..{len(_CLASS_COLORS)}")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ContractError("invalid objects-per-image range")
        if self.min_size * self.image_size < 2.0:
            raise ContractError("minimum box side must be >= 2 pixels")


@dataclass
class Scene:
    image: np.ndarray   # [3, H, W] float32 in [0, 1]
    boxes: np.ndarray   # [G, 4] normalized cxcywh
    labels: np.ndarray  # [G] int


def _inside(shape: int, xs: np.ndarray, ys: np.ndarray, cx, cy, w, h) -> np.ndarray:
    if shape == 0:  # circle
        r = w / 2.0
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == 1:  # axis-aligned square
        return (np.abs(xs - cx) <= w / 2.0) & (np.abs(ys - cy) <= h / 2.0)
    # isoceles triangle, apex up
    t = (ys - (cy - h / 2.0)) / h
    return (t >= 0.0) & (t <= 1.0) & (np.abs(xs - cx) <= (w / 2.0) * t)


def _paint(image: np.ndarray, shape: int, cx, cy, w, h, color: np.ndarray) -> None:
    size = image.shape[1]
    x0 = max(int(np.floor((cx - w / 2) * size)) - 1, 0)
    x1 = min(int(np.ceil((cx + w / 2) * size)) + 1, size)
    y0 = max(int(np.floor((cy - h / 2) * size)) - 1, 0)
    y1 = min(int(np.ceil((cy + h / 2) * size)) + 1, size)
    if x0 >= x1 or y0 >= y1:
        return
    sub = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES
    px = (x0 + np.arange(x1 - x0))[None, :, None, None] + sub[None, None, None, :]
    py = (y0 + np.arange(y1 - y0))[:, None, None, None] + sub[None, None, :, None]
    cov = _inside(shape, px / size, py / size, cx, cy, w, h).mean(axis=(2, 3))
    region = image[:, y0:y1, x0:x1]
    image[:, y0:y1, x0:x1] = region * (1.0 - cov) + color[:, None, None] * cov


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    """Deterministic scene for (cfg.seed, index); boxes tight to the shapes."""
    rng = np.random.default_rng([cfg.seed, int(index)])
    size = cfg.image_size
    image = np.full((3, size, size), _BACKGROUND, dtype=np.float64)
    if cfg.noise > 0:
        image += rng.normal(0.0, cfg.noise, image.shape)
    if cfg.distractors > 0:
        for _ in range(int(rng.integers(0, cfg.distractors + 1))):
            _paint_stroke(image, rng)
    want = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes, labels = [], []
    for _ in range(want):
        for _try in range(20):
            w = rng.uniform(cfg.min_size, cfg.max_size)
            h = w
            cx = rng.uniform(w / 2, 1.0 - w / 2)
            cy = rng.uniform(h / 2, 1.0 - h / 2)
            cand = np.array([cx, cy, w, h])
            if all(_pair_iou(cand, b) < 0.25 for b in boxes):
                break
        else:
            continue
        label = int(rng.integers(0, cfg.num_classes))
        color = np.clip(_CLASS_COLORS[label] + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        _paint(image, label, cx, cy, w, h, color)
        boxes.append(cand)
        labels.append(label)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    boxes_arr = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    return Scene(image=image, boxes=boxes_arr, labels=np.asarray(labels, dtype=np.int64))


def _paint_stroke(image: np.ndarray, rng: np.random.Generator) -> None:
    """Unlabeled thin bright stroke: background clutter with object-like edges."""
    size = image.shape[1]
    ax, ay = rng.uniform(0.05, 0.95, 2)
    ang = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.12, 0.3)
    bx = np.clip(ax + np.cos(ang) * length, 0.02, 0.98)
    by = np.clip(ay + np.sin(ang) * length, 0.02, 0.98)
    radius = rng.uniform(0.8, 1.6) / size
    color = rng.uniform(0.35, 0.95, 3)
    x0 = max(int((min(ax, bx) - radius) * size) - 1, 0)
    x1 = min(int((max(ax, bx) + radius) * size) + 2, size)
    y0 = max(int((min(ay, by) - radius) * size) - 1, 0)
    y1 = min(int((max(ay, by) + radius) * size) + 2, size)
    if x0 >= x1 or y0 >= y1:
        return
    sub = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES
    px = ((x0 + np.arange(x1 - x0))[None, :, None, None] + sub[None, None, None, :]) / size
    py = ((y0 + np.arange(y1 - y0))[:, None, None, None] + sub[None, None, :, None]) / size
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(den, 1e-9), 0.0, 1.0)
    dist2 = (px - (ax + t * dx)) ** 2 + (py - (ay + t * dy)) ** 2
    cov = (dist2 <= radius * radius).mean(axis=(2, 3))
    region = image[:, y0:y1, x0:x1]
    image[:, y0:y1, x0:x1] = region * (1.0 - cov) + color[:, None, None] * cov


def _pair_iou(a, b) -> float:
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def generate_scenes(cfg: SceneConfig, n: int, start: int = 0) -> list[Scene]:
    return [generate_scene(cfg, start + i) for i in range(n)]


# ---------------------------------------------------------------------------
# SDDS1 binary dataset format
# ---------------------------------------------------------------------------

_DATA_MAGIC = b"SDDS1"


def export_dataset(cfg: SceneConfig, n: int, path: str) -> None:
    """Write n generated scenes: magic, u32 count, then per-scene payloads."""
    with open(path, "wb") as f:
        f.write(_DATA_MAGIC)
        f.write(struct.pack("<I", n))
        for i in range(n):
            scene = generate_scene(cfg, i)
            write_scene(f, scene)


def write_scene(f, scene: Scene) -> None:
    _, h, w = scene.image.shape
    f.write(struct.pack("<II", h, w))
    f.write(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
    f.write(struct.pack("<I", len(scene.labels)))
    for box, label in zip(scene.boxes, scene.labels):
        f.write(struct.pack("<4fI", *(float(v) for v in box), int(label)))


def import_dataset(path: str) -> list[Scene]:
    """Read an SDDS1 file back into scenes, bit-exact."""
    with open(path, "rb") as f:
        blob = f.read()
    total = len(blob)
    if blob[:5] != _DATA_MAGIC:
        raise FormatError(f"bad dataset magic {blob[:5]!r} at byte 0")
    pos = 5

    def need(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > total:
            raise FormatError(
                f"truncated dataset: {what} needs bytes up to {pos + nbytes}, file has {total}")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", need(4, "scene count"))
    scenes = []
    for si in range(count):
        h, w = struct.unpack("<II", need(8, f"scene {si} dims"))
        img = np.frombuffer(need(12 * h * w, f"scene {si} pixels"), dtype="<f4")
        img = img.reshape(3, h, w).copy()
        (nobj,) = struct.unpack("<I", need(4, f"scene {si} object count"))
        boxes = np.zeros((nobj, 4), dtype=np.float32)
        labels = np.zeros(nobj, dtype=np.int64)
        for oi in range(nobj):
            vals = struct.unpack("<4fI", need(20, f"scene {si} object {oi}"))
            boxes[oi] = vals[:4]
            labels[oi] = vals[4]
        scenes.append(Scene(image=img, boxes=boxes, labels=labels))
    if pos != total:
        raise FormatError(f"dataset has {total - pos} trailing bytes at offset {pos}")
    return scenes
