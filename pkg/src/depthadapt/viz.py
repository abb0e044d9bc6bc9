"""Colormapped depth-map export.

The colormap is fixed and embedded here rather than pulled from a
plotting library, so the written bytes can never drift with a
dependency upgrade.  It interpolates linearly through five anchors,
near to far:

    index 0    (31, 26, 89)    dark blue
    index 64   (33, 144, 140)  teal
    index 128  (66, 190, 113)  green
    index 192  (219, 216, 71)  yellow
    index 255  (252, 68, 43)   red

Depth is clamped to the given range and mapped affinely onto the
256-entry table; the range minimum lands exactly on index 0 and the
maximum exactly on index 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError

_ANCHORS = (
    (0, (31, 26, 89)),
    (64, (33, 144, 140)),
    (128, (66, 190, 113)),
    (192, (219, 216, 71)),
    (255, (252, 68, 43)),
)


def _build_lut():
    lut = np.zeros((256, 3), dtype=np.uint8)
    for (i0, c0), (i1, c1) in zip(_ANCHORS[:-1], _ANCHORS[1:]):
        span = i1 - i0
        for j in range(i0, i1 + 1):
            t = (j - i0) / span
            lut[j] = [round((1 - t) * a + t * b) for a, b in zip(c0, c1)]
    return lut


DEPTH_LUT = _build_lut()


def colorize_depth(depth: np.ndarray, depth_range) -> np.ndarray:
    """(H, W) depth in meters -> (H, W, 3) uint8 via the fixed table."""
    lo, hi = depth_range
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise ConfigError(f"need finite depth_range with lo < hi, got {depth_range}")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ShapeError(f"expected a (H, W) depth map, got shape {depth.shape}")
    t = np.clip((depth - lo) / (hi - lo), 0.0, 1.0)
    idx = np.round(t * 255.0).astype(np.uint8)
    return DEPTH_LUT[idx]


def export_viz(depth: np.ndarray, path, depth_range) -> None:
    """Write one depth map as an 8-bit color PNG; deterministic."""
    rgb = colorize_depth(depth, depth_range)
    path = Path(path)
    try:
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write visualization {path}: {exc}") from exc
