"""Point clouds, range images and the spherical projection between them.

A range image row is the laser id of the return, a column is the azimuth bin
``u = floor((pi - atan2(y, x)) / delta_h) mod m``.  Invalid pixels carry range 0
and a false validity flag.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

CLEAN = 0
NOISE = 1
INVALID = 255


def default_elevations(n_rows: int, upper_deg: float = 10.0, lower_deg: float = -30.0) -> np.ndarray:
    """Evenly spaced elevation table in radians, row 0 looking highest."""
    if n_rows == 1:
        return np.zeros(1)
    return np.deg2rad(np.linspace(upper_deg, lower_deg, n_rows))


@dataclass(frozen=True)
class SensorConfig:
    n_rows: int = 32
    delta_h: float = 2 * math.pi / 512
    max_range: float = 80.0
    elevations: Optional[tuple] = None

    def __post_init__(self):
        if self.n_rows < 1:
            raise ValueError("n_rows must be >= 1")
        if not self.delta_h > 0:
            raise ValueError("delta_h must be positive")
        if self.n_cols < 8:
            raise ValueError(f"delta_h gives only {self.n_cols} columns, need >= 8")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if self.elevations is None:
            object.__setattr__(self, "elevations", tuple(default_elevations(self.n_rows).tolist()))
        elif len(self.elevations) != self.n_rows:
            raise ValueError("elevation table needs one entry per row")

    @property
    def n_cols(self) -> int:
        return int(round(2 * math.pi / self.delta_h))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def elevation_array(self) -> np.ndarray:
        return np.asarray(self.elevations, dtype=np.float64)

    @classmethod
    def with_cols(cls, n_rows: int, n_cols: int, **kw) -> "SensorConfig":
        return cls(n_rows=n_rows, delta_h=2 * math.pi / n_cols, **kw)

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "delta_h": self.delta_h,
            "max_range": self.max_range,
            "elevations": list(self.elevations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        return cls(
            n_rows=int(d["n_rows"]),
            delta_h=float(d["delta_h"]),
            max_range=float(d["max_range"]),
            elevations=tuple(d["elevations"]) if d.get("elevations") is not None else None,
        )


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float = 0.0
    laser_id: int = 0


class PointCloud:
    """Structure-of-arrays point cloud: ``xyz`` (N, 3), ``intensity`` (N,), ``laser_id`` (N,)."""

    def __init__(self, xyz, intensity=None, laser_id=None):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(xyz).all():
            raise ValueError("point coordinates must be finite")
        n = len(xyz)
        self.xyz = xyz
        self.intensity = (
            np.zeros(n) if intensity is None else np.asarray(intensity, dtype=np.float64).reshape(n)
        )
        self.laser_id = (
            np.zeros(n, dtype=np.int64) if laser_id is None else np.asarray(laser_id, dtype=np.int64).reshape(n)
        )

    @classmethod
    def from_points(cls, points) -> "PointCloud":
        points = list(points)
        if not points:
            return cls(np.zeros((0, 3)))
        return cls(
            [(p.x, p.y, p.z) for p in points],
            [p.intensity for p in points],
            [p.laser_id for p in points],
        )

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(float(x), float(y), float(z), float(self.intensity[i]), int(self.laser_id[i]))

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.intensity[idx], self.laser_id[idx])

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)


@dataclass
class RangeImage:
    """Dense laser-id x azimuth grid of ranges.

    ``rng`` holds meters with 0 for invalid pixels; ``valid`` is derived from it
    unless given.  ``intensity`` and ``labels`` are optional planes of the same
    shape (labels use CLEAN / NOISE / INVALID).
    """

    rng: np.ndarray
    valid: np.ndarray = None
    intensity: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    # point index per pixel when built by project(), -1 where empty
    source_index: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.rng = np.asarray(self.rng, dtype=np.float64)
        if self.valid is None:
            self.valid = self.rng > 0
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.rng.shape:
            raise ValueError("validity mask shape differs from range plane")
        if np.any(self.rng[~self.valid] != 0):
            raise ValueError("invalid pixels must have range 0")
        if np.any(self.rng[self.valid] <= 0):
            raise ValueError("valid pixels must have positive range")
        for name in ("intensity", "labels"):
            plane = getattr(self, name)
            if plane is not None and plane.shape != self.rng.shape:
                raise ValueError(f"{name} plane shape differs from range plane")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rng.shape

    @classmethod
    def empty(cls, shape, with_intensity: bool = False) -> "RangeImage":
        return cls(np.zeros(shape), intensity=np.zeros(shape) if with_intensity else None)

    def copy(self) -> "RangeImage":
        return RangeImage(
            self.rng.copy(),
            self.valid.copy(),
            None if self.intensity is None else self.intensity.copy(),
            None if self.labels is None else self.labels.copy(),
        )

    def flip(self) -> "RangeImage":
        """Azimuth reversal (horizontal flip) of every plane."""
        f = lambda a: None if a is None else a[:, ::-1].copy()
        return RangeImage(f(self.rng), f(self.valid), f(self.intensity), f(self.labels))


def range_of(p: Point) -> float:
    return math.sqrt(p.x * p.x + p.y * p.y + p.z * p.z)


def azimuth_columns(x, y, delta_h: float, n_cols: int) -> np.ndarray:
    u = np.floor((np.pi - np.arctan2(y, x)) / delta_h).astype(np.int64)
    return np.mod(u, n_cols)


def project(cloud: PointCloud, cfg: SensorConfig) -> RangeImage:
    """Project a cloud onto the range image, keeping the nearest return per pixel.

    Points whose laser id falls outside ``[0, n_rows)`` are dropped; their count
    is available as ``img.rejected``.
    """
    n_rows, n_cols = cfg.shape
    rng = np.zeros((n_rows, n_cols))
    intensity = np.zeros((n_rows, n_cols))
    src = np.full((n_rows, n_cols), -1, dtype=np.int64)

    ok = (cloud.laser_id >= 0) & (cloud.laser_id < n_rows)
    rejected = int((~ok).sum())
    if rejected:
        logger.warning("project: rejected %d points with laser_id outside [0, %d)", rejected, n_rows)

    idx = np.flatnonzero(ok)
    r = cloud.ranges[idx]
    # zero-range points carry no return
    keep = r > 0
    idx, r = idx[keep], r[keep]
    u = azimuth_columns(cloud.xyz[idx, 0], cloud.xyz[idx, 1], cfg.delta_h, n_cols)
    v = cloud.laser_id[idx]
    flat = v * n_cols + u
    # nearest return wins: sort by (pixel, range) and take the first per pixel
    order = np.lexsort((r, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]

    rng.ravel()[flat[win]] = r[win]
    intensity.ravel()[flat[win]] = cloud.intensity[idx[win]]
    src.ravel()[flat[win]] = idx[win]
    img = RangeImage(rng, intensity=intensity, source_index=src)
    img.rejected = rejected
    return img


def pixel_directions(cfg: SensorConfig) -> np.ndarray:
    """Unit ray direction per pixel, shape (n_rows, n_cols, 3), through the pixel's azimuth center."""
    n_rows, n_cols = cfg.shape
    az = np.pi - (np.arange(n_cols) + 0.5) * cfg.delta_h
    el = cfg.elevation_array
    cos_el = np.cos(el)[:, None]
    d = np.empty((n_rows, n_cols, 3))
    d[..., 0] = cos_el * np.cos(az)[None, :]
    d[..., 1] = cos_el * np.sin(az)[None, :]
    d[..., 2] = np.sin(el)[:, None]
    return d


def unproject(img: RangeImage, cfg: SensorConfig) -> PointCloud:
    """One point per valid pixel, in row-major pixel order."""
    if img.shape != cfg.shape:
        raise ValueError(f"image shape {img.shape} does not match sensor {cfg.shape}")
    rows, cols = np.nonzero(img.valid)
    d = pixel_directions(cfg)[rows, cols]
    r = img.rng[rows, cols]
    inten = img.intensity[rows, cols] if img.intensity is not None else None
    return PointCloud(d * r[:, None], inten, rows)


def pixel_index_of_points(img: RangeImage) -> tuple[np.ndarray, np.ndarray]:
    """(rows, cols) of valid pixels in the order unproject() emits them."""
    return np.nonzero(img.valid)
