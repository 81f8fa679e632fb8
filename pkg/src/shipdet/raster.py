"""Pixel-level helpers for detection overlays and objectness heatmaps."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import zoom

OVERLAY_VALUE = 65535


def pixel_box(box, shape: tuple[int, int]) -> tuple[int, int, int, int] | None:
    """Inclusive integer pixel extent (c1, r1, c2, r2) covered by a continuous xyxy box, clipped."""
    h, w = shape
    x1, y1, x2, y2 = (float(v) for v in box)
    c1, r1 = max(0, math.floor(x1)), max(0, math.floor(y1))
    c2, r2 = min(w - 1, math.ceil(x2) - 1), min(h - 1, math.ceil(y2) - 1)
    if c2 < c1 or r2 < r1:
        return None
    return c1, r1, c2, r2


def border_pixel_count(extent: tuple[int, int, int, int]) -> int:
    """Pixels on the 1-px border of an inclusive extent: 2w + 2h - 4, or the area when thinner than 3 px."""
    c1, r1, c2, r2 = extent
    bw, bh = c2 - c1 + 1, r2 - r1 + 1
    if bw <= 2 or bh <= 2:
        return bw * bh
    return 2 * bw + 2 * bh - 4


def box_border_mask(shape: tuple[int, int], boxes) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for box in boxes:
        ext = pixel_box(box, shape)
        if ext is None:
            continue
        c1, r1, c2, r2 = ext
        mask[r1, c1:c2 + 1] = True
        mask[r2, c1:c2 + 1] = True
        mask[r1:r2 + 1, c1] = True
        mask[r1:r2 + 1, c2] = True
    return mask


def draw_boxes(values: np.ndarray, boxes, value: int = OVERLAY_VALUE) -> np.ndarray:
    out = np.array(values, copy=True)
    out[box_border_mask(out.shape, boxes)] = value
    return out


def upsample_bilinear(heat: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel aligned bilinear resize of a 2-d map to ``size``."""
    heat = np.asarray(heat, dtype=float)
    h, w = heat.shape
    out = zoom(heat, (size[0] / h, size[1] / w), order=1, mode="nearest", grid_mode=True)
    if out.shape != tuple(size):
        raise ValueError(f"resize produced {out.shape}, wanted {size}")
    return out


def to_u16(p: np.ndarray) -> np.ndarray:
    """Probabilities in [0, 1] to 16-bit levels p * 65535, rounded."""
    return np.rint(np.clip(p, 0.0, 1.0) * 65535).astype(np.uint16)
