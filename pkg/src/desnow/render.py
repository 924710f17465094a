"""PNG rendering: bird's-eye-view outcome scatter and range-image heatmaps.

Outcome colors: TP red, FP green, TN gray, FN yellow (noise is the positive
class).  Heatmaps use ``HEAT_ANCHORS``, a black-purple-red-orange-cream ramp
whose luminance increases strictly, so brighter always means larger.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .geom import CLEAN, INVALID, NOISE, PointCloud

TP_COLOR = (255, 0, 0)
FP_COLOR = (0, 255, 0)
TN_COLOR = (128, 128, 128)
FN_COLOR = (255, 255, 0)
BACKGROUND = (0, 0, 0)
INVALID_COLOR = (255, 255, 255)
OUTCOME_COLORS = {"TP": TP_COLOR, "FP": FP_COLOR, "TN": TN_COLOR, "FN": FN_COLOR}

HEAT_ANCHORS = np.array([
    (0, 0, 0),
    (80, 10, 120),
    (190, 40, 70),
    (250, 140, 20),
    (255, 245, 190),
], dtype=np.float64)

LEGEND_HEIGHT = 18


@dataclass(frozen=True)
class BevConfig:
    resolution: float = 0.2  # meters per pixel
    extent: float = 40.0  # half-width of the square view, meters

    @property
    def size(self) -> int:
        return int(round(2 * self.extent / self.resolution))


def outcome_codes(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-point outcome string ('TP', 'FP', 'TN', 'FN'); '' where either side is Invalid."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    out = np.full(pred.shape, "", dtype="<U2")
    ok = (pred != INVALID) & (gt != INVALID)
    out[ok & (pred == NOISE) & (gt == NOISE)] = "TP"
    out[ok & (pred == NOISE) & (gt == CLEAN)] = "FP"
    out[ok & (pred == CLEAN) & (gt == CLEAN)] = "TN"
    out[ok & (pred == CLEAN) & (gt == NOISE)] = "FN"
    return out


def bev_pixels(xyz: np.ndarray, cfg: BevConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raster (row, col) per point with x pointing right and y up; third value marks points inside the view."""
    col = np.floor((xyz[:, 0] + cfg.extent) / cfg.resolution).astype(np.int64)
    row = np.floor((cfg.extent - xyz[:, 1]) / cfg.resolution).astype(np.int64)
    inside = (col >= 0) & (col < cfg.size) & (row >= 0) & (row < cfg.size)
    return row, col, inside


def _legend(draw: ImageDraw.ImageDraw, top: int, width: int) -> None:
    x = 4
    for name, color in OUTCOME_COLORS.items():
        draw.rectangle([x, top + 4, x + 9, top + 13], fill=color)
        draw.text((x + 13, top + 3), name, fill=(255, 255, 255))
        x += 44
        if x > width - 40:
            break


def render_bev(cloud: PointCloud, pred: Optional[np.ndarray] = None, gt: Optional[np.ndarray] = None,
               cfg: BevConfig = BevConfig(), legend: bool = True) -> Image.Image:
    """Top-down scatter of ``cloud`` colored by outcome (all gray without labels).

    The legend occupies a strip below the square map, so map pixels are never covered.
    """
    n = len(cloud)
    if pred is None or gt is None:
        codes = np.full(n, "TN", dtype="<U2")
    else:
        codes = outcome_codes(pred, gt)
        if len(codes) != n:
            raise ValueError("labels must align with cloud points")
    size = cfg.size
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND
    row, col, inside = bev_pixels(cloud.xyz, cfg)
    # paint TN first so rarer outcomes stay visible where points overlap
    for name in ("TN", "FN", "FP", "TP"):
        sel = inside & (codes == name)
        canvas[row[sel], col[sel]] = OUTCOME_COLORS[name]
    img = Image.fromarray(canvas, "RGB")
    if not legend:
        return img
    full = Image.new("RGB", (size, size + LEGEND_HEIGHT), BACKGROUND)
    full.paste(img, (0, 0))
    _legend(ImageDraw.Draw(full), size, size)
    return full


def heat_colors(values: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Map values to RGB through ``HEAT_ANCHORS``; NaN maps to ``INVALID_COLOR``."""
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    out = np.empty(values.shape + (3,), dtype=np.uint8)
    out[:] = INVALID_COLOR
    if not ok.any():
        return out
    lo = float(np.min(values[ok])) if lo is None else lo
    hi = float(np.max(values[ok])) if hi is None else hi
    t = np.zeros(values.shape)
    if hi > lo:
        t[ok] = np.clip((values[ok] - lo) / (hi - lo), 0.0, 1.0)
    pos = np.linspace(0.0, 1.0, len(HEAT_ANCHORS))
    for ch in range(3):
        out[..., ch][ok] = np.round(np.interp(t[ok], pos, HEAT_ANCHORS[:, ch])).astype(np.uint8)
    return out


def render_heatmap(values: np.ndarray, valid: Optional[np.ndarray] = None, row_scale: int = 4,
                   lo: Optional[float] = None, hi: Optional[float] = None) -> Image.Image:
    """Range-image heatmap (range or difficulty); rows are repeated ``row_scale`` times for legibility."""
    values = np.asarray(values, dtype=np.float64).copy()
    if valid is not None:
        values[~np.asarray(valid, dtype=bool)] = np.nan
    rgb = heat_colors(values, lo, hi)
    if row_scale > 1:
        rgb = np.repeat(rgb, row_scale, axis=0)
    return Image.fromarray(rgb, "RGB")
