"""Snow-noise dataset synthesis.

Noise labels come from comparing a noisy capture against a clean reference,
noise is injected into clean base scans subject to the attenuation-limited
maximum detectable range, and a ray-cast procedural scene generator supplies
the clean base scans.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import CLEAN, INVALID, NOISE, RangeImage, SensorConfig, pixel_directions


@dataclass(frozen=True)
class SynthConfig:
    tau: float = 1.0
    gain: float = 0.45
    extinction: float = 0.02
    noise_floor: float = 0.05

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if not self.extinction > 0:
            raise ValueError("extinction coefficient must be positive")
        if not self.noise_floor > 0:
            raise ValueError("noise floor must be positive")
        if self.gain < 0:
            raise ValueError("gain must be >= 0")


def _check_same_shape(*imgs):
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"range images differ in shape: {sorted(shapes)}")


def extract_noise_labels(noisy: RangeImage, clean_ref: RangeImage, tau: float) -> np.ndarray:
    """Label each return of ``noisy`` by whether it sits at least ``tau`` in front of the reference.

    A return whose reference pixel is empty (sky) is always noise.
    """
    _check_same_shape(noisy, clean_ref)
    in_front = clean_ref.rng >= noisy.rng + tau
    noise = noisy.valid & (in_front | ~clean_ref.valid)
    labels = np.where(noise, NOISE, CLEAN).astype(np.uint8)
    labels[~noisy.valid] = INVALID
    return labels


def max_detectable_range(intensity, base_range, cfg: SynthConfig):
    """Attenuation-limited range ``min(-ln(n / (I + g)) / (2 beta), R_B)``.

    Works elementwise.  Where ``n >= I + g`` nothing is detectable and 0 is
    returned; the second value is a boolean flag array marking those pixels.
    """
    intensity = np.asarray(intensity, dtype=np.float64)
    base_range = np.asarray(base_range, dtype=np.float64)
    received = intensity + cfg.gain
    degenerate = cfg.noise_floor >= received
    with np.errstate(divide="ignore", invalid="ignore"):
        atten = -np.log(cfg.noise_floor / received) / (2.0 * cfg.extinction)
    out = np.where(degenerate, 0.0, np.minimum(atten, base_range))
    if out.ndim == 0:
        return float(out), bool(degenerate)
    return out, degenerate


def inject_noise(base: RangeImage, noisy: RangeImage, noise_labels: np.ndarray, cfg: SynthConfig,
                 sky_range: float = math.inf) -> tuple[RangeImage, np.ndarray]:
    """Replace base returns by noise returns that the sensor could have detected.

    Base pixels without a return are treated as an unobstructed ray (range
    ``sky_range``, intensity 0) when computing the detectable range.
    Returns the synthesized image and its ground-truth label plane.
    """
    _check_same_shape(base, noisy)
    if noise_labels.shape != base.shape:
        raise ValueError("label map shape differs from range images")
    b_int = base.intensity if base.intensity is not None else np.zeros(base.shape)
    b_int = np.where(base.valid, b_int, 0.0)
    b_rng = np.where(base.valid, base.rng, sky_range)
    rmax, _ = max_detectable_range(b_int, b_rng, cfg)
    inject = (noise_labels == NOISE) & noisy.valid & (noisy.rng <= rmax)

    rng = np.where(inject, noisy.rng, base.rng)
    intensity = None
    if base.intensity is not None or noisy.intensity is not None:
        n_int = noisy.intensity if noisy.intensity is not None else np.zeros(base.shape)
        intensity = np.where(inject, n_int, np.where(base.valid, b_int, 0.0))
    valid = inject | base.valid
    labels = np.where(inject, NOISE, CLEAN).astype(np.uint8)
    labels[~valid] = INVALID
    out = RangeImage(rng, valid, intensity, labels)
    return out, labels


# --------------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and full extents, meters."""
    center: tuple
    extents: tuple
    albedo: float = 0.5

    def __post_init__(self):
        if min(self.extents) <= 0:
            raise ValueError(f"degenerate box extents {self.extents}")


@dataclass
class SceneSpec:
    ground_z: float | None = -1.8
    ground_albedo: float = 0.3
    boxes: list = field(default_factory=list)

    @classmethod
    def empty(cls) -> "SceneSpec":
        return cls(ground_z=None, boxes=[])


def _ray_box(d: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method entry distance and hit-face axis for rays from the origin; inf on miss."""
    c = np.asarray(box.center, dtype=np.float64)
    h = np.asarray(box.extents, dtype=np.float64) / 2
    lo, hi = c - h, c + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = lo * inv
        t2 = hi * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = d == 0
    inside = (lo <= 0) & (0 <= hi)
    tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin_ax.max(axis=-1)
    axis = tmin_ax.argmax(axis=-1)
    t_far = tmax_ax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf), axis


def generate_scene(spec: SceneSpec, cfg: SensorConfig, seed: int = 0) -> RangeImage:
    """Ray-cast the analytic scene from a sensor at the origin.

    Intensity is a Lambertian ``albedo * |cos(incidence)|``.  ``seed`` is
    accepted for interface symmetry; the geometry itself is deterministic.
    """
    d = pixel_directions(cfg)
    best = np.full(cfg.shape, np.inf)
    inten = np.zeros(cfg.shape)

    if spec.ground_z is not None:
        dz = d[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = spec.ground_z / dz
        t = np.where((dz != 0) & (t > 0), t, np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        inten = np.where(closer, spec.ground_albedo * np.abs(dz), inten)

    for box in spec.boxes:
        t, axis = _ray_box(d, box)
        closer = t < best
        cos_inc = np.abs(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
        best = np.where(closer, t, best)
        inten = np.where(closer, box.albedo * cos_inc, inten)

    valid = best <= cfg.max_range
    rng = np.where(valid, best, 0.0)
    return RangeImage(rng, valid, np.where(valid, inten, 0.0))


def random_scene(rng: np.random.Generator, cfg: SensorConfig) -> SceneSpec:
    """Road-like scene: ground, facades on both sides, parked cars, poles."""
    boxes = []
    lim = 0.8 * cfg.max_range
    half_road = rng.uniform(6.0, 12.0)
    for side in (-1, 1):
        x = -lim / 2
        while x < lim:
            length = rng.uniform(8.0, 30.0)
            gap = rng.uniform(0.0, 6.0)
            depth = rng.uniform(5.0, 12.0)
            offset = half_road + rng.uniform(0.0, 4.0)
            boxes.append(Box(
                center=(x + length / 2, side * (offset + depth / 2), 4.0),
                extents=(length, depth, 12.0),
                albedo=rng.uniform(0.3, 0.8),
            ))
            x += length + gap
    for _ in range(rng.integers(3, 9)):
        side = rng.choice([-1, 1])
        boxes.append(Box(
            center=(rng.uniform(-35, 35), side * rng.uniform(2.5, half_road - 1.0), -1.8 + 0.75),
            extents=(rng.uniform(3.8, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.7)),
            albedo=rng.uniform(0.2, 0.9),
        ))
    for _ in range(rng.integers(2, 8)):
        side = rng.choice([-1, 1])
        boxes.append(Box(
            center=(rng.uniform(-40, 40), side * (half_road - 0.5), 1.2),
            extents=(0.3, 0.3, 6.0),
            albedo=rng.uniform(0.3, 0.7),
        ))
    return SceneSpec(ground_z=-1.8, ground_albedo=rng.uniform(0.2, 0.4), boxes=boxes)


def generate_snow(count: int, seed: int, cfg: SensorConfig, mean_range: float = 8.0,
                  min_range: float = 0.5) -> RangeImage:
    """``count`` noise returns at uniformly chosen pixels, ranges from a truncated exponential."""
    if count < 0:
        raise ValueError("count must be >= 0")
    n = cfg.n_rows * cfg.n_cols
    if count > n:
        raise ValueError(f"count {count} exceeds {n} pixels")
    gen = np.random.default_rng(seed)
    pix = gen.choice(n, size=count, replace=False)
    # inverse CDF of the exponential truncated to (min_range, max_range)
    lo = 1.0 - math.exp(-min_range / mean_range)
    hi = 1.0 - math.exp(-cfg.max_range / mean_range)
    q = gen.uniform(lo, hi, size=count)
    r = -mean_range * np.log1p(-q)
    r = np.clip(r, np.nextafter(min_range, math.inf), cfg.max_range)

    rng_plane = np.zeros(n)
    rng_plane[pix] = r
    inten = np.zeros(n)
    inten[pix] = gen.uniform(0.0, 0.2, size=count)
    rng_plane = rng_plane.reshape(cfg.shape)
    labels = np.full(cfg.shape, INVALID, dtype=np.uint8)
    labels[rng_plane > 0] = NOISE
    return RangeImage(rng_plane, intensity=inten.reshape(cfg.shape), labels=labels)


class NoiseLevel(enum.Enum):
    LIGHT = "Light"
    MEDIUM = "Medium"
    HEAVY = "Heavy"
    EXTREME = "Extreme"


NOISE_LEVEL_BOUNDS = ((0.02, NoiseLevel.LIGHT), (0.05, NoiseLevel.MEDIUM), (0.10, NoiseLevel.HEAVY))


def noise_fraction(labels: np.ndarray) -> float:
    n_noise = int((labels == NOISE).sum())
    n_valid = n_noise + int((labels == CLEAN).sum())
    if n_valid == 0:
        raise ValueError("label map has no valid pixels")
    return n_noise / n_valid


def stratify_noise_level(labels: np.ndarray) -> NoiseLevel:
    f = noise_fraction(labels)
    for bound, level in NOISE_LEVEL_BOUNDS:
        if f < bound:
            return level
    return NoiseLevel.EXTREME


@dataclass
class Scan:
    clean: RangeImage
    noisy: RangeImage
    labels: np.ndarray
    noise_count: int
    level: NoiseLevel


def synthesize_scan(seed: int, cfg: SensorConfig, noise_count_range=(0.03, 0.10),
                    synth_cfg: SynthConfig = SynthConfig()) -> Scan:
    """One clean scene plus injected snow.

    ``noise_count_range`` is either a pair of integer counts or, when both
    bounds are below 1, a pair of fractions of the pixel count.
    """
    gen = np.random.default_rng(seed)
    spec = random_scene(gen, cfg)
    base = generate_scene(spec, cfg, seed)
    a, b = noise_count_range
    n_pix = cfg.n_rows * cfg.n_cols
    if b < 1:
        a, b = int(round(a * n_pix)), int(round(b * n_pix))
    count = int(gen.integers(a, b + 1))
    snow = generate_snow(count, int(gen.integers(2**31)), cfg)
    # the capture reference is empty surroundings, so every captured return is noise
    noise_labels = extract_noise_labels(snow, RangeImage.empty(cfg.shape), synth_cfg.tau)
    noisy, labels = inject_noise(base, snow, noise_labels, synth_cfg, sky_range=math.inf)
    return Scan(base, noisy, labels, count, stratify_noise_level(labels))


def synthesize_dataset(n_scans: int, cfg: SensorConfig, seed: int = 0, noise_count_range=(0.03, 0.10),
                       synth_cfg: SynthConfig = SynthConfig()) -> list[Scan]:
    seeds = np.random.SeedSequence(seed).generate_state(n_scans)
    return [synthesize_scan(int(s), cfg, noise_count_range, synth_cfg) for s in seeds]
