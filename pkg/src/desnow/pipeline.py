"""Dataset splits, per-scan scoring and the glue between synthesis, models and evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .filters import DrorConfig, RorConfig, dror, ror
from .formats import label_plane, read_range_image_with_header, sensor_from_header, write_range_image
from .geom import RangeImage, SensorConfig, unproject
from .model import DesnowModel
from .postprocess import ShiftConfig, classify, percentile_shift, select_threshold
from .synth import Scan, noise_fraction
from .training import infer_difficulty, infer_noise_probability

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Sizes per split: rounded cumulative boundaries, so they always sum to ``n``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or not math.isclose(float(ratios.sum()), 1.0, abs_tol=1e-9):
        raise ValueError("split ratios must be nonnegative and sum to 1")
    if n < int(np.count_nonzero(ratios)):
        raise ValueError(f"{n} scans cannot fill {np.count_nonzero(ratios)} splits")
    bounds = np.floor(np.cumsum(ratios) * n + 0.5).astype(int)
    bounds[-1] = n
    sizes = np.diff(np.concatenate([[0], bounds])).tolist()
    # a nonzero ratio must not end up with an empty split
    for i, r in enumerate(ratios):
        if r > 0 and sizes[i] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_dataset(items: Sequence, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> dict[str, list]:
    """Deterministic disjoint train/val/test partition of ``items``."""
    if len(ratios) != len(SPLITS):
        raise ValueError("need one ratio per split")
    sizes = split_sizes(len(items), ratios)
    order = np.random.default_rng(seed).permutation(len(items))
    out, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        out[name] = [items[i] for i in sorted(order[start:start + size])]
        start += size
    return out


def filter_labels(img: RangeImage, sensor: SensorConfig, method: str = "dror",
                  ror_cfg: RorConfig = RorConfig(), dror_cfg: DrorConfig = DrorConfig()) -> np.ndarray:
    """Label plane from a classical filter run on the unprojected scan."""
    cloud = unproject(img, sensor)
    if method == "dror":
        noise = dror(cloud, dror_cfg, sensor)
    elif method == "ror":
        noise = ror(cloud, ror_cfg)
    else:
        raise ValueError(f"unknown filter {method!r}")
    plane = np.zeros(img.shape, dtype=bool)
    rows, cols = np.nonzero(img.valid)
    plane[rows, cols] = noise
    return label_plane(img.valid, plane)


def parse_shift(spec: str) -> Optional[ShiftConfig]:
    """``p20`` -> 20th percentile, ``min`` -> 0th, ``none`` -> raw scores."""
    spec = spec.lower()
    if spec == "none":
        return None
    if spec == "min":
        return ShiftConfig(percentile=0)
    if spec.startswith("p") and spec[1:].isdigit():
        return ShiftConfig(percentile=int(spec[1:]))
    raise ValueError(f"bad shift spec {spec!r}")


def score_scan(model: DesnowModel, img: RangeImage, shift: Optional[ShiftConfig] = ShiftConfig(),
               source: str = "difficulty") -> np.ndarray:
    """Per-pixel noise score (NaN without a return).

    ``source`` is ``difficulty`` (optionally depth-shifted) or ``classifier``
    (noise probability of the supervised head, never shifted).
    """
    if source == "classifier":
        return infer_noise_probability(model, img)
    if source != "difficulty":
        raise ValueError(f"unknown score source {source!r}")
    phi = infer_difficulty(model, img)
    return phi if shift is None else percentile_shift(phi, img.rng, shift)


@dataclass
class Detector:
    model: DesnowModel
    threshold: float
    shift: Optional[ShiftConfig] = ShiftConfig()
    source: str = "difficulty"

    def scores(self, img: RangeImage) -> np.ndarray:
        return score_scan(self.model, img, self.shift, self.source)

    def predict(self, img: RangeImage) -> np.ndarray:
        return classify(self.scores(img), self.threshold, img.valid)


def fit_detector(model: DesnowModel, val_images: Sequence[RangeImage], val_labels: Sequence[np.ndarray],
                 shift: Optional[ShiftConfig] = ShiftConfig(), source: str = "difficulty") -> Detector:
    """Pick the threshold that maximizes pooled IoU on the validation scans."""
    scores = [score_scan(model, im, shift, source) for im in val_images]
    return Detector(model, select_threshold(scores, list(val_labels)), shift, source)


# on-disk datasets ---------------------------------------------------------

def scan_files(scan_id: str) -> dict[str, str]:
    return {"noisy": f"{scan_id}.noisy.rimg", "clean": f"{scan_id}.clean.rimg"}


def write_dataset(out: Path, scans: Sequence[Scan], sensor: SensorConfig, seed: int,
                  ratios=(0.7, 0.15, 0.15), extra: dict | None = None) -> dict:
    """Write noisy scans (with label plane), clean scans and a manifest with splits and noise levels."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"scan_{i:05d}" for i in range(len(scans))]
    splits = split_dataset(ids, ratios, seed)
    split_of = {sid: name for name, members in splits.items() for sid in members}
    entries = []
    for sid, scan in zip(ids, scans):
        files = scan_files(sid)
        noisy = RangeImage(scan.noisy.rng, scan.noisy.valid, scan.noisy.intensity, scan.labels)
        write_range_image(out / files["noisy"], noisy, sensor)
        write_range_image(out / files["clean"], scan.clean, sensor)
        entries.append({
            "id": sid,
            **files,
            "split": split_of[sid],
            "noise_count": int(scan.noise_count),
            "noise_fraction": noise_fraction(scan.labels),
            "noise_level": scan.level.value,
        })
    manifest = {"seed": seed, "sensor": sensor.to_dict(), "ratios": list(ratios), "scans": entries}
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    return json.loads(path.read_text())


def load_split(root, split: Optional[str] = None) -> tuple[list[dict], list[RangeImage], SensorConfig]:
    """Entries and noisy images (labels attached) of one split, or of all scans when ``split`` is None."""
    root = Path(root)
    manifest = read_manifest(root)
    entries = [e for e in manifest["scans"] if split is None or e["split"] == split]
    images = []
    for e in entries:
        img, _ = read_range_image_with_header(root / e["noisy"])
        images.append(img)
    return entries, images, SensorConfig.from_dict(manifest["sensor"])


def sensor_of_image(path) -> SensorConfig:
    return sensor_from_header(read_range_image_with_header(path)[1])
