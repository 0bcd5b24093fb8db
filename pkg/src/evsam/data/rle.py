"""Uncompressed COCO-style run-length encoding.

Masks are scanned column-major (down each column, columns left to right).
``counts`` alternates run lengths of 0s and 1s and always starts with a run
of 0s, which is 0 when the first scanned pixel is set.
"""
from __future__ import annotations

import numpy as np


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_decode(counts, width: int, height: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("negative run length")
    if sum(counts) != width * height:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {width * height}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def to_coco(mask: np.ndarray) -> dict:
    h, w = mask.shape
    return {"size": [h, w], "counts": rle_encode(mask)}


def from_coco(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    return rle_decode(rle["counts"], w, h)
