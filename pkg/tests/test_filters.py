import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from desnow.filters import DrorConfig, RorConfig, dror, dror_radii, neighbor_counts, ror
from desnow.geom import PointCloud, SensorConfig
from oracles import neighbor_counts as brute_counts


def walls(sensor, distances, az_half_width=0.3):
    """Points of planar walls x = d sampled on the sensor's angular grid."""
    pts, lids = [], []
    el = sensor.elevation_array
    az = math.pi - (np.arange(sensor.n_cols) + 0.5) * sensor.delta_h
    az = az[np.abs(az) < az_half_width]
    for d in distances:
        for v, e in enumerate(el):
            for a in az:
                r = d / (math.cos(e) * math.cos(a))
                pts.append((d, r * math.cos(e) * math.sin(a), r * math.sin(e)))
                lids.append(v)
    return PointCloud(pts, laser_id=lids)


def test_isolated_point_is_noise():
    xyz = np.vstack([np.random.default_rng(0).normal(size=(50, 3)) * 0.05, [[100.0, 0, 0]]])
    out = ror(PointCloud(xyz), RorConfig(0.5, 2))
    assert out[-1]


def test_single_point_is_noise():
    assert ror(PointCloud([[1.0, 2.0, 3.0]]), RorConfig(1.0, 1)).tolist() == [True]


def test_dense_grid_interior_clean():
    g = np.arange(10) * 0.1
    xx, yy = np.meshgrid(g, g)
    xyz = np.stack([xx.ravel(), yy.ravel(), np.zeros(100)], 1)
    out = ror(PointCloud(xyz), RorConfig(0.3, 2))
    np.testing.assert_array_equal(neighbor_counts(xyz, 0.3), brute_counts(xyz, 0.3))
    interior = (xx.ravel() > 0.05) & (xx.ravel() < 0.85) & (yy.ravel() > 0.05) & (yy.ravel() < 0.85)
    assert not out[interior].any()


def test_dror_radius_clamp_and_monotone():
    sensor = SensorConfig()
    cfg = DrorConfig()
    assert dror_radii(np.array([0.0]), cfg, sensor)[0] == cfg.min_search_radius
    r = np.linspace(0, 100, 200)
    assert np.all(np.diff(dror_radii(r, cfg, sensor)) >= 0)


def test_dror_huge_multiplier_keeps_everything():
    xyz = np.random.default_rng(1).uniform(-50, 50, (200, 3))
    out = dror(PointCloud(xyz), DrorConfig(radius_multiplier=1e9, min_neighbors=3), SensorConfig())
    assert not out.any()


def test_two_walls_ror_fails_far_dror_keeps():
    sensor = SensorConfig()
    cloud = walls(sensor, [10.0, 40.0])
    near = cloud.xyz[:, 0] < 20
    ror_out = ror(cloud, RorConfig(search_radius=0.3, min_neighbors=3))
    dror_out = dror(cloud, DrorConfig(), sensor)
    # only the four wall corners (two neighbors each) drop out of the near wall
    assert int(ror_out[near].sum()) == 4
    assert ror_out[~near].all()
    assert not dror_out.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 300), r=st.floats(0.01, 3.0))
def test_ror_matches_brute_force(seed, n, r):
    xyz = np.random.default_rng(seed).uniform(-5, 5, (n, 3))
    np.testing.assert_array_equal(neighbor_counts(xyz, r), brute_counts(xyz, r))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 300))
def test_dror_matches_brute_force(seed, n):
    sensor = SensorConfig()
    cfg = DrorConfig()
    xyz = np.random.default_rng(seed).uniform(-20, 20, (n, 3))
    radii = dror_radii(np.linalg.norm(xyz, axis=1), cfg, sensor)
    expect = brute_counts(xyz, radii) < cfg.min_neighbors
    np.testing.assert_array_equal(dror(PointCloud(xyz), cfg, sensor), expect)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), r1=st.floats(0.05, 2.0), grow=st.floats(0.0, 2.0))
def test_larger_radius_never_creates_noise(seed, r1, grow):
    xyz = np.random.default_rng(seed).uniform(-3, 3, (150, 3))
    small = ror(PointCloud(xyz), RorConfig(r1, 3))
    large = ror(PointCloud(xyz), RorConfig(r1 + grow, 3))
    assert not np.any(large & ~small)


def test_config_validation():
    with pytest.raises(ValueError):
        RorConfig(0.0, 1)
    with pytest.raises(ValueError):
        RorConfig(1.0, 0)
    with pytest.raises(ValueError):
        DrorConfig(radius_multiplier=0)
    with pytest.raises(ValueError):
        DrorConfig(min_search_radius=0)
