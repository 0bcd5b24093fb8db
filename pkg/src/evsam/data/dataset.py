"""Synthetic shape scenes and their on-disk layout.

A scene is a textured background with ellipses, rectangles and triangles
painted back to front; a later shape hides whatever it covers, so earlier
instance masks lose those pixels. Image values are multiples of 1/255 so a
scene survives a round trip through 8-bit PPM exactly.

Directory layout::

    root/index.csv            image_id,image,masks,size,instances
    root/images/NNNN.ppm      binary P6, 8 bits per channel
    root/masks/NNNN.rle       one instance per line: kind x0 y0 x1 y1 counts...
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rle import rle_decode, rle_encode
from .rng import philox

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")


@dataclass
class Instance:
    mask: np.ndarray                       # H x W bool
    box: tuple[int, int, int, int]         # x0, y0, x1, y1 (x1/y1 exclusive)
    kind: str

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SyntheticScene:
    image: np.ndarray                      # 3 x S x S float32 in [0, 1]
    instances: list[Instance] = field(default_factory=list)


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight bounding box with exclusive upper edges."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _shape_mask(kind: str, size: int, cx: float, cy: float, radius: float, aspect: float,
                angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    a, b = radius, radius * aspect
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a * 0.85) & (np.abs(v) <= b * 0.85)
    # triangle: three half-planes around the centre
    inside = np.ones((size, size), dtype=bool)
    for k in range(3):
        t = 2 * math.pi * k / 3
        nx, ny = math.cos(t), math.sin(t)
        inside &= (u * nx / a + v * ny / b) <= 0.5
    return inside


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    base = rng.uniform(0.2, 0.8, 3)
    for ch in range(3):
        layer = np.full((size, size), base[ch])
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 4.0, 2)
            phase = rng.uniform(0, 2 * math.pi)
            layer += rng.uniform(0.03, 0.1) * np.sin(2 * math.pi * (fx * xs + fy * ys) + phase)
        img[ch] = layer
    img += rng.normal(0, 0.02, img.shape)
    return img


def generate_scene(seed: int, index: int, size: int, max_instances: int,
                   min_area: int | None = None) -> SyntheticScene:
    rng = philox(seed, index)
    min_area = max(4, (size // 32) ** 2) if min_area is None else min_area
    img = _background(rng, size)
    n = int(rng.integers(1, max_instances + 1))
    masks: list[np.ndarray] = []
    kinds: list[str] = []
    while len(masks) < n:
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, 2)
        radius = rng.uniform(0.1, 0.25) * size
        m = _shape_mask(kind, size, cx, cy, radius, rng.uniform(0.6, 1.0), rng.uniform(0, math.pi))
        if m.sum() < min_area:
            continue
        color = rng.uniform(0, 1, 3)
        shade = 1.0 + 0.15 * np.sin(np.mgrid[0:size, 0:size][1] * rng.uniform(0.1, 0.4))
        img[:, m] = (color[:, None] * shade[m][None, :])
        masks = [old & ~m for old in masks]
        masks.append(m)
        kinds.append(kind)
    keep = [(m, k) for m, k in zip(masks, kinds) if m.sum() >= min_area]
    image = (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)
    return SyntheticScene(image, [Instance(m, mask_box(m), k) for m, k in keep])


def gen_dataset(seed: int, n_images: int, size: int, max_instances: int) -> list[SyntheticScene]:
    """Deterministic scenes; image ``i`` draws from Philox stream ``(seed, i)``."""
    if size % 32 or size <= 0:
        raise ValueError(f"image size {size} must be a positive multiple of 32")
    if max_instances < 1:
        raise ValueError("max_instances must be >= 1")
    return [generate_scene(seed, i, size, max_instances) for i in range(n_images)]


# -- disk format ------------------------------------------------------------

def write_ppm(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def save_dataset(scenes: list[SyntheticScene], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, scene in enumerate(scenes):
        img_name, mask_name = f"images/{i:04d}.ppm", f"masks/{i:04d}.rle"
        write_ppm(root / img_name, scene.image)
        h, w = scene.image.shape[1:]
        lines = [f"# {w} {h}"]
        for inst in scene.instances:
            counts = " ".join(map(str, rle_encode(inst.mask)))
            lines.append(f"{inst.kind} {' '.join(map(str, inst.box))} {counts}")
        (root / mask_name).write_text("\n".join(lines) + "\n")
        rows.append([i, img_name, mask_name, w, len(scene.instances)])
    with open(root / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "image", "masks", "size", "instances"])
        writer.writerows(rows)


def load_dataset(root) -> list[SyntheticScene]:
    root = Path(root)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no index.csv under {root}")
    scenes = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            image = read_ppm(root / row["image"])
            lines = (root / row["masks"]).read_text().splitlines()
            w, h = (int(v) for v in lines[0].lstrip("# ").split())
            instances = []
            for line in lines[1:]:
                if not line.strip():
                    continue
                kind, *nums = line.split()
                box = tuple(int(v) for v in nums[:4])
                mask = rle_decode(nums[4:], w, h)
                instances.append(Instance(mask, box, kind))
            scenes.append(SyntheticScene(image, instances))
    return scenes
