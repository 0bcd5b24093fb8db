"""Click-simulation and box-prompt evaluation.

Distances are measured from a pixel centre to the nearest pixel centre
outside the region, with everything beyond the image border counting as
outside. A one-pixel region therefore has distance 1, and the first click
lands on the deepest interior pixel.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data.dataset import SyntheticScene, mask_box
from .sam_head import BACKGROUND, FOREGROUND, PromptSet
from .training import mask_iou, preprocess

CHAMFER_ABOVE = 64          # masks with a side above this use the 3-4 chamfer transform
BUCKETS = ("small", "medium", "large")


class Converged(Exception):
    """The prediction equals the ground truth; there is nowhere left to click."""


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return mask_iou(a, b)


def _chamfer(region: np.ndarray) -> np.ndarray:
    """Two-pass 3-4 chamfer distance (divided by 3) to the nearest outside pixel."""
    big = 10 ** 9
    h, w = region.shape
    d = np.where(np.pad(region, 1), big, 0).astype(np.int64)
    for y in range(1, h + 1):
        for x in range(1, w + 1):
            if d[y, x]:
                d[y, x] = min(d[y, x], d[y - 1, x - 1] + 4, d[y - 1, x] + 3, d[y - 1, x + 1] + 4, d[y, x - 1] + 3)
    for y in range(h, 0, -1):
        for x in range(w, 0, -1):
            if d[y, x]:
                d[y, x] = min(d[y, x], d[y + 1, x + 1] + 4, d[y + 1, x] + 3, d[y + 1, x - 1] + 4, d[y, x + 1] + 3)
    return d[1:-1, 1:-1] / 3.0


def _distance(mask: np.ndarray, method: str) -> np.ndarray:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("distance transform of an empty mask")
    if method == "auto":
        method = "chamfer" if max(mask.shape) > CHAMFER_ABOVE else "exact"
    if method == "exact":
        return ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    if method == "chamfer":
        return _chamfer(mask)
    raise ValueError(f"unknown distance method {method!r}")


def boundary_distance(mask: np.ndarray, method: str = "auto") -> np.ndarray:
    """Per-pixel distance to the nearest pixel outside ``mask`` (0 outside).

    ``method`` is ``exact`` (Euclidean), ``chamfer`` (3-4 weights) or
    ``auto``, which is exact up to 64 x 64 and chamfer above.
    """
    return _distance(mask, method).astype(np.float32)


def _deepest(region: np.ndarray, method: str) -> tuple[int, int]:
    d = _distance(region, method)
    flat = int(np.argmax(d))            # first maximum in row-major order
    r, c = divmod(flat, region.shape[1])
    return r, c


def initial_click(gt: np.ndarray, method: str = "auto") -> tuple[float, float, int]:
    r, c = _deepest(np.asarray(gt, bool), method)
    return (c + 0.5, r + 0.5, FOREGROUND)


def error_component(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of gt XOR pred (earliest in scan order on ties)."""
    err = np.logical_xor(gt, pred)
    if not err.any():
        raise Converged()
    labels, n = ndimage.label(err)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


@dataclass
class ClickState:
    gt: np.ndarray
    prediction: np.ndarray | None = None
    clicks: list[tuple[float, float, int]] = field(default_factory=list)

    def prompts(self) -> PromptSet:
        return PromptSet(points=list(self.clicks))


def next_click(state: ClickState, method: str = "auto") -> tuple[float, float, int]:
    """Deepest pixel of the largest error component, labelled by which side it is on.

    Raises ``Converged`` when the prediction already equals the ground truth.
    """
    if state.prediction is None:
        raise ValueError("next_click needs a current prediction")
    gt = np.asarray(state.gt, bool)
    region = error_component(gt, np.asarray(state.prediction, bool))
    r, c = _deepest(region, method)
    return (c + 0.5, r + 0.5, FOREGROUND if gt[r, c] else BACKGROUND)


# -- protocols ----------------------------------------------------------------

@dataclass
class EvalItem:
    mask_id: str
    image: np.ndarray
    gt: np.ndarray


def eval_items(dataset: list[SyntheticScene], input_size: int) -> list[EvalItem]:
    """Every non-empty ground-truth mask, mapped into model input space."""
    items = []
    for i, scene in enumerate(dataset):
        pre = preprocess(scene.image, [inst.mask for inst in scene.instances], input_size)
        for j, m in enumerate(pre.masks):
            if m.any():
                items.append(EvalItem(f"{i}:{j}", pre.image, m))
    return items


def size_bucket(area: int, input_size: int) -> str:
    scale = (input_size / 1024) ** 2
    if area < 32 ** 2 * scale:
        return "small"
    if area < 96 ** 2 * scale:
        return "medium"
    return "large"


class _ImageCache:
    """Calls ``set_image`` only when the image changes between items."""

    def __init__(self, predictor):
        self.predictor = predictor
        self._current = None

    def use(self, image):
        if self._current is not image:
            self.predictor.set_image(image)
            self._current = image


@dataclass
class ClickResult:
    rows: list[dict]
    miou: dict[int, float]


def click_eval(predictor, dataset: list[SyntheticScene], input_size: int,
               clicks_at=(1, 3, 5), method: str = "auto") -> ClickResult:
    """Simulated-click mIoU after each budget in ``clicks_at``.

    ``predictor`` offers ``set_image(image)`` and ``predict(PromptSet) ->
    bool mask``. All accumulated clicks are sent each round. Once the
    prediction is exact the remaining budgets reuse the last IoU.
    """
    budgets = sorted(set(int(k) for k in clicks_at))
    if not budgets or budgets[0] < 1:
        raise ValueError("click budgets must be >= 1")
    items = eval_items(dataset, input_size)
    if not items:
        raise ValueError("dataset has no ground-truth masks")
    cache = _ImageCache(predictor)
    rows = []
    for item in items:
        cache.use(item.image)
        state = ClickState(item.gt, None, [initial_click(item.gt, method)])
        scores = []
        for k in range(1, budgets[-1] + 1):
            if k > 1:
                try:
                    state.clicks.append(next_click(state, method))
                except Converged:
                    scores += [scores[-1]] * (budgets[-1] - len(scores))
                    break
            state.prediction = predictor.predict(state.prompts())
            scores.append(iou(state.prediction, item.gt))
        row = {"mask_id": item.mask_id, "area_bucket": size_bucket(int(item.gt.sum()), input_size)}
        row.update({f"iou@{k}": scores[k - 1] for k in budgets})
        rows.append(row)
    miou = {k: math.fsum(r[f"iou@{k}"] for r in rows) / len(rows) for k in budgets}
    return ClickResult(rows, miou)


@dataclass
class BoxResult:
    rows: list[dict]
    miou: float
    buckets: dict[str, float | None]
    counts: dict[str, int]


def box_eval(predictor, dataset: list[SyntheticScene], input_size: int) -> BoxResult:
    """One tight ground-truth box per mask; mIoU overall and per size bucket."""
    items = eval_items(dataset, input_size)
    if not items:
        raise ValueError("dataset has no ground-truth masks")
    cache = _ImageCache(predictor)
    rows = []
    for item in items:
        cache.use(item.image)
        pred = predictor.predict(PromptSet(box=mask_box(item.gt)))
        rows.append({"mask_id": item.mask_id, "area_bucket": size_bucket(int(item.gt.sum()), input_size),
                     "box_iou": iou(pred, item.gt)})
    buckets, counts = {}, {}
    for b in BUCKETS:
        vals = [r["box_iou"] for r in rows if r["area_bucket"] == b]
        counts[b] = len(vals)
        buckets[b] = math.fsum(vals) / len(vals) if vals else None
    return BoxResult(rows, math.fsum(r["box_iou"] for r in rows) / len(rows), buckets, counts)


class OraclePredictor:
    """Returns the ground-truth mask that the prompt refers to.

    A box selects the mask whose tight box it equals; points select the mask
    under the first foreground click. Used to validate the protocols.
    """

    def __init__(self, dataset: list[SyntheticScene], input_size: int):
        self._by_image: dict[bytes, list[np.ndarray]] = {}
        for item in eval_items(dataset, input_size):
            self._by_image.setdefault(item.image.tobytes(), []).append(item.gt)
        self._masks: list[np.ndarray] = []
        self.calls = 0

    def set_image(self, image) -> None:
        self._masks = self._by_image[np.asarray(image).tobytes()]

    def predict(self, prompts: PromptSet) -> np.ndarray:
        self.calls += 1
        for m in self._masks:
            if prompts.box is not None and mask_box(m) == tuple(int(v) for v in prompts.box):
                return m.copy()
            for x, y, lab in prompts.points:
                if lab == FOREGROUND:
                    if m[int(y), int(x)]:
                        return m.copy()
                    break
        return np.zeros_like(self._masks[0])


# -- reports ------------------------------------------------------------------

def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else ("" if v is None else str(v))


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for r in rows:
            writer.writerow([_fmt(v) for v in r.values()])


def write_summary(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()))


def click_summary(result: ClickResult) -> dict:
    out = {"masks": len(result.rows)}
    out.update({f"miou@{k}": v for k, v in result.miou.items()})
    return out


def box_summary(result: BoxResult) -> dict:
    out = {"masks": len(result.rows), "miou": result.miou}
    for b in BUCKETS:
        out[f"miou_{b}"] = result.buckets[b]
        out[f"count_{b}"] = result.counts[b]
    return out
