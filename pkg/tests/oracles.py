"""Independent reference computations shared by several test modules."""
import numpy as np


def rel_err(a, b) -> float:
    """Normwise relative error ``max|a - b| / max|b|`` against reference ``b``.

    Elementwise ratios blow up on entries where signed terms cancel, so the
    error is measured against the largest reference magnitude instead.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def brute_force_distance(mask: np.ndarray) -> np.ndarray:
    """Distance from each set pixel to the nearest unset pixel, border ring included.

    Every pixel pair is compared explicitly.
    """
    h, w = mask.shape
    outside = [(r, c) for r in range(-1, h + 1) for c in range(-1, w + 1)
               if not (0 <= r < h and 0 <= c < w) or not mask[r, c]]
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                out[r, c] = min(np.sqrt((r - rr) ** 2 + (c - cc) ** 2) for rr, cc in outside)
    return out


def brute_force_argmax(mask: np.ndarray) -> tuple[int, int]:
    """Deepest pixel, ties to the smallest (row, col)."""
    d = brute_force_distance(mask)
    best, where = -1.0, None
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            if mask[r, c] and d[r, c] > best:
                best, where = d[r, c], (r, c)
    return where


def components4(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """4-connected components by flood fill, in raster order of their first pixel."""
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack, comp = [(r, c)], []
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    comp.append((y, x))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(comp)
    return comps


def oracle_next_click(gt: np.ndarray, pred: np.ndarray):
    err = gt ^ pred
    comps = components4(err)
    if not comps:
        return None
    biggest = max(comps, key=len)          # max keeps the first of equal sizes
    region = np.zeros_like(gt)
    for y, x in biggest:
        region[y, x] = True
    r, c = brute_force_argmax(region)
    return (c + 0.5, r + 0.5, 1 if gt[r, c] else 0)
