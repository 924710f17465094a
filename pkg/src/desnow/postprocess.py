"""Depth-binned percentile shift, thresholding and validation threshold search."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geom import CLEAN, INVALID, NOISE
from .metrics import iou_from_counts

PAPER_THRESHOLD = 2.9  # reference value in the original units; thresholds here are validation-selected


@dataclass(frozen=True)
class ShiftConfig:
    bin_width: float = 1.0
    percentile: float = 20
    min_bin_count: int = 5

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")


def nearest_rank(sorted_vals: np.ndarray, p: float):
    """Nearest-rank percentile of an ascending array: the ceil(p/100 * n)-th value (1-based, at least 1st)."""
    n = len(sorted_vals)
    k = max(1, math.ceil(round(p * n, 9) / 100))
    return sorted_vals[min(k, n) - 1]


def bin_shifts(scores: np.ndarray, ranges: np.ndarray, cfg: ShiftConfig) -> dict[int, float]:
    """Shift per occupied depth bin.  Sparse bins borrow from the nearest bin with enough points."""
    bins = np.floor(ranges / cfg.bin_width).astype(np.int64)
    order = np.lexsort((scores, bins))
    b_sorted, s_sorted = bins[order], scores[order]
    keys, starts, counts = np.unique(b_sorted, return_index=True, return_counts=True)
    own = {int(k): nearest_rank(s_sorted[a:a + c], cfg.percentile) for k, a, c in zip(keys, starts, counts)}
    dense = np.array([k for k, c in zip(keys, counts) if c >= cfg.min_bin_count], dtype=np.int64)
    shifts = {}
    for k, c in zip(keys, counts):
        k = int(k)
        if c >= cfg.min_bin_count or len(dense) == 0:
            shifts[k] = own[k]
        else:
            # ties go to the nearer-range bin
            dist = np.abs(dense - k)
            shifts[k] = own[int(dense[np.argmin(dist)])]
    return shifts


def percentile_shift(scores, ranges, cfg: ShiftConfig = ShiftConfig()) -> np.ndarray:
    """Subtract each depth bin's percentile from its scores.

    ``scores``/``ranges`` may be planes; NaN scores (pixels without a return)
    are left as NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranges = np.asarray(ranges, dtype=np.float64)
    if scores.shape != ranges.shape:
        raise ValueError("scores and ranges must align")
    out = scores.copy()
    ok = ~np.isnan(scores)
    if not ok.any():
        return out
    s, r = scores[ok], ranges[ok]
    shifts = bin_shifts(s, r, cfg)
    bins = np.floor(r / cfg.bin_width).astype(np.int64)
    keys = np.array(sorted(shifts))
    vals = np.array([shifts[k] for k in keys])
    out[ok] = s - vals[np.searchsorted(keys, bins)]
    return out


def classify(scores, threshold: float, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Noise where score > threshold; pixels without a score are Invalid."""
    scores = np.asarray(scores, dtype=np.float64)
    if valid is None:
        valid = ~np.isnan(scores)
    with np.errstate(invalid="ignore"):
        noise = scores > threshold
    out = np.where(noise, NOISE, CLEAN).astype(np.uint8)
    out[~valid] = INVALID
    return out


def _pool(scores: Sequence[np.ndarray], gts: Sequence[np.ndarray]):
    s_all, g_all = [], []
    for s, g in zip(scores, gts):
        s = np.asarray(s, dtype=np.float64)
        g = np.asarray(g)
        use = (g != INVALID) & ~np.isnan(s)
        s_all.append(s[use])
        g_all.append(g[use] == NOISE)
    return np.concatenate(s_all), np.concatenate(g_all)


def counts_over_grid(scores, is_noise, grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(TP, FP, FN) for every threshold in ``grid`` under the rule score > threshold."""
    noise_s = np.sort(scores[is_noise])
    clean_s = np.sort(scores[~is_noise])
    grid = np.asarray(grid, dtype=np.float64)
    tp = len(noise_s) - np.searchsorted(noise_s, grid, side="right")
    fp = len(clean_s) - np.searchsorted(clean_s, grid, side="right")
    fn = len(noise_s) - tp
    return tp, fp, fn


def default_grid(scores: np.ndarray, n: int = 1001) -> np.ndarray:
    """Score quantiles plus the float just below the minimum, so "all noise" is reachable."""
    q = np.quantile(scores, np.linspace(0.0, 1.0, n))
    return np.unique(np.concatenate([[np.nextafter(q[0], -np.inf)], q]))


def select_threshold(scores, gts, grid=None) -> float:
    """Grid threshold maximizing pooled validation IoU; ties resolve to the lower threshold.

    ``scores``/``gts`` are sequences of per-scan planes (or single planes).
    """
    if isinstance(scores, np.ndarray) and scores.ndim <= 2:
        scores, gts = [scores], [gts]
    s, noise = _pool(scores, gts)
    if len(s) == 0 or noise.all() or not noise.any():
        raise ValueError("validation data must contain both clean and noise pixels")
    grid = default_grid(s) if grid is None else np.sort(np.asarray(grid, dtype=np.float64))
    if len(grid) == 0:
        raise ValueError("empty threshold grid")
    tp, fp, fn = counts_over_grid(s, noise, grid)
    iou = np.array([iou_from_counts(a, b, c) for a, b, c in zip(tp, fp, fn)])
    iou = np.nan_to_num(iou, nan=-1.0)
    return float(grid[int(np.argmax(iou))])
