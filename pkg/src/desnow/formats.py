"""On-disk formats for point clouds, range images and per-point label files.

Binary point cloud::

    16 bytes   magic b"SLIDEPC1" zero-padded
    u32        point count
    count x    (f32 x, f32 y, f32 z, f32 intensity, u16 laser_id)

Range image: one line of UTF-8 JSON (shape, delta_h, sensor, channels),
a newline, then row-major little-endian planes in channel order. ``range``
and ``intensity`` are f32, ``label`` is u8 (0 clean, 1 noise, 255 invalid).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geom import INVALID, PointCloud, RangeImage, SensorConfig

PC_MAGIC = b"SLIDEPC1".ljust(16, b"\0")
_PC_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("laser_id", "<u2")])


def write_cloud_csv(path, cloud: PointCloud) -> None:
    with open(path, "w") as f:
        for (x, y, z), i, lid in zip(cloud.xyz.tolist(), cloud.intensity.tolist(), cloud.laser_id.tolist()):
            f.write(f"{x!r},{y!r},{z!r},{i!r},{lid}\n")


def read_cloud_csv(path) -> PointCloud:
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.size == 0:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(rows[:, :3], rows[:, 3], rows[:, 4].astype(np.int64))


def write_cloud_bin(path, cloud: PointCloud) -> None:
    rec = np.empty(len(cloud), dtype=_PC_RECORD)
    rec["x"], rec["y"], rec["z"] = cloud.xyz.T
    rec["intensity"] = cloud.intensity
    rec["laser_id"] = cloud.laser_id
    with open(path, "wb") as f:
        f.write(PC_MAGIC)
        f.write(struct.pack("<I", len(cloud)))
        f.write(rec.tobytes())


def read_cloud_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:16] != PC_MAGIC:
        raise ValueError(f"{path}: not a SLIDEPC1 point cloud")
    (count,) = struct.unpack_from("<I", raw, 16)
    rec = np.frombuffer(raw, dtype=_PC_RECORD, count=count, offset=20)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return PointCloud(xyz, rec["intensity"].astype(np.float64), rec["laser_id"].astype(np.int64))


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".csv":
        return read_cloud_csv(path)
    return read_cloud_bin(path)


def write_cloud(path, cloud: PointCloud) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        write_cloud_csv(path, cloud)
    else:
        write_cloud_bin(path, cloud)


def write_range_image(path, img: RangeImage, cfg: SensorConfig, extra: dict | None = None) -> None:
    channels = ["range"]
    planes = [img.rng.astype("<f4")]
    if img.intensity is not None:
        channels.append("intensity")
        planes.append(img.intensity.astype("<f4"))
    if img.labels is not None:
        channels.append("label")
        planes.append(img.labels.astype("u1"))
    header = {
        "shape": list(img.shape),
        "delta_h": cfg.delta_h,
        "channels": channels,
        "sensor": cfg.to_dict(),
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for p in planes:
            f.write(np.ascontiguousarray(p).tobytes())


def read_range_image_with_header(path) -> tuple[RangeImage, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    shape = tuple(header["shape"])
    n = shape[0] * shape[1]
    off = nl + 1
    planes = {}
    for ch in header["channels"]:
        dt = np.dtype("u1") if ch == "label" else np.dtype("<f4")
        planes[ch] = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
    rng = planes["range"].astype(np.float64)
    img = RangeImage(
        rng,
        intensity=planes["intensity"].astype(np.float64) if "intensity" in planes else None,
        labels=planes["label"].copy() if "label" in planes else None,
    )
    return img, header


def read_range_image(path) -> RangeImage:
    return read_range_image_with_header(path)[0]


def sensor_from_header(header: dict) -> SensorConfig:
    return SensorConfig.from_dict(header["sensor"])


def write_labels(path, labels) -> None:
    np.asarray(labels, dtype=np.uint8).tofile(path)


def read_labels(path, shape=None) -> np.ndarray:
    lab = np.fromfile(path, dtype=np.uint8)
    return lab.reshape(shape) if shape is not None else lab


def label_plane(valid: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = np.where(noise, 1, 0).astype(np.uint8)
    out[~valid] = INVALID
    return out
