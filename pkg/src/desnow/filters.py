"""Radius outlier removal (ROR) and dynamic radius outlier removal (DROR).

Both return a per-point boolean array, True where the point is judged noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, SensorConfig


@dataclass(frozen=True)
class RorConfig:
    search_radius: float = 0.3
    min_neighbors: int = 3

    def __post_init__(self):
        if not self.search_radius > 0:
            raise ValueError("search_radius must be positive")
        if self.min_neighbors < 1:
            raise ValueError("min_neighbors must be >= 1")


@dataclass(frozen=True)
class DrorConfig:
    radius_multiplier: float = 3.0
    min_search_radius: float = 0.04
    min_neighbors: int = 3

    def __post_init__(self):
        if not self.radius_multiplier > 0:
            raise ValueError("radius_multiplier must be positive")
        if not self.min_search_radius > 0:
            raise ValueError("min_search_radius must be positive")
        if self.min_neighbors < 1:
            raise ValueError("min_neighbors must be >= 1")


def neighbor_counts(xyz: np.ndarray, radii) -> np.ndarray:
    """Number of *other* points within ``radii`` (scalar or per point, inclusive) of each point."""
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (n,))
    tree = cKDTree(xyz)
    if np.all(radii == radii[0]):
        counts = tree.query_ball_point(xyz, radii[0], return_length=True)
    else:
        counts = tree.query_ball_point(xyz, radii, return_length=True)
    # the query point itself is always inside its own ball
    return np.asarray(counts, dtype=np.int64) - 1


def ror(cloud: PointCloud, cfg: RorConfig) -> np.ndarray:
    counts = neighbor_counts(cloud.xyz, cfg.search_radius)
    return counts < cfg.min_neighbors


def dror_radii(ranges, cfg: DrorConfig, sensor: SensorConfig) -> np.ndarray:
    return np.maximum(cfg.min_search_radius, cfg.radius_multiplier * np.asarray(ranges) * sensor.delta_h)


def dror(cloud: PointCloud, cfg: DrorConfig, sensor: SensorConfig) -> np.ndarray:
    radii = dror_radii(cloud.ranges, cfg, sensor)
    counts = neighbor_counts(cloud.xyz, radii)
    return counts < cfg.min_neighbors
