"""Blanking, the reconstruction-difficulty losses and semi-supervised weighting schedules.

All ranges here are in normalized units (meters divided by the model's range
scale).  The difficulty output ``phi`` is clamped to [-10, 10] before use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import (
    Tensor,
    absolute,
    channel_min,
    clamp,
    exp,
    log_softmax,
    masked_sum,
    mul,
    sub,
    add,
    div,
)
from .geom import NOISE, RangeImage

SQRT2 = math.sqrt(2.0)
PHI_CLAMP = 10.0


def sample_blank_mask(valid: np.ndarray, ratio: float, seed) -> np.ndarray:
    """Pick ``round(ratio * n_valid)`` valid pixels uniformly without replacement.

    Rounding is half-up, so one valid pixel at ratio 0.5 gives one blank.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        raise ValueError("no valid pixels to blank")
    n = int(math.floor(ratio * len(idx) + 0.5))
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = gen.choice(len(idx), size=n, replace=False)
    mask = np.zeros(valid.size, dtype=bool)
    mask[idx[pick]] = True
    return mask.reshape(valid.shape)


def blank(img: RangeImage, mask: np.ndarray) -> RangeImage:
    mask = np.asarray(mask, dtype=bool)
    if np.any(mask & ~img.valid):
        raise ValueError("blank mask selects invalid pixels")
    out = img.copy()
    out.rng[mask] = 0.0
    out.valid[mask] = False
    if out.labels is not None:
        out.labels = out.labels.copy()
    return out


def _clamped(phi: Tensor) -> Tensor:
    return clamp(phi, -PHI_CLAMP, PHI_CLAMP)


def _laplace_nll(err: Tensor, phi: Tensor, mask: np.ndarray) -> Tensor:
    p = _clamped(phi)
    per_pixel = add(div(mul(err, SQRT2), exp(p)), p)
    return masked_sum(per_pixel, mask)


def _squeeze_hyp(theta: Tensor) -> Tensor:
    if theta.ndim == 4:
        if theta.shape[1] != 1:
            raise ValueError("single-hypothesis loss needs exactly one output channel")
        return theta[:, 0]
    return theta


def loss_self(theta: Tensor, target: np.ndarray, phi: Tensor, mask: np.ndarray) -> Tensor:
    """Sum over masked pixels of ``sqrt(2) |theta - R| / exp(phi) + phi``."""
    theta = _squeeze_hyp(theta)
    err = absolute(sub(theta, Tensor(target)))
    return _laplace_nll(err, phi, mask)


def min_hypothesis_error(thetas: Tensor, target: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Per-pixel ``min_k |theta_k - R|`` over axis 1 and the winning hypothesis index."""
    target = np.asarray(target, dtype=np.float64)
    errs = absolute(sub(thetas, Tensor(target[:, None])))
    return channel_min(errs)


def loss_self_mhl(thetas: Tensor, target: np.ndarray, phi: Tensor, mask: np.ndarray) -> Tensor:
    """Multi-hypothesis variant: only the best hypothesis per pixel carries loss."""
    c, _ = min_hypothesis_error(thetas, target)
    return _laplace_nll(c, phi, mask)


def loss_sup(logits: Tensor, labels: np.ndarray, labeled: np.ndarray | None = None,
             reduction: str = "mean") -> Tensor:
    """Two-class cross-entropy (channel 1 = noise) over labeled clean/noise pixels."""
    labels = np.asarray(labels)
    use = labels != 255
    if labeled is not None:
        use &= np.asarray(labeled, dtype=bool)
    sel = np.stack([use & (labels != NOISE), use & (labels == NOISE)], axis=1)
    logp = log_softmax(logits, axis=1)
    total = mul(masked_sum(logp, sel), -1.0)
    n = int(use.sum())
    if reduction == "mean" and n:
        return mul(total, 1.0 / n)
    return total


def loss_semi(self_loss, sup_loss, state: "ScheduleState"):
    return add(mul(self_loss, state.w_self), mul(sup_loss, state.w_sup))


# ------------------------------------------------------------------ schedules

@dataclass(frozen=True)
class ScheduleConfig:
    ramp_up: float = 0.2
    ramp_down: float = 0.2
    switch: float = 0.5
    smooth_start: float = 0.2
    smooth_end: float = 0.8


@dataclass(frozen=True)
class ScheduleState:
    t: float
    w_self: float
    w_sup: float


SCHEDULES = ("ramp", "pretrain", "smooth")


def _gauss_ramp(x: float) -> float:
    return math.exp(-5.0 * (1.0 - x) ** 2)


def schedule(mode: str, t: float, cfg: ScheduleConfig = ScheduleConfig()) -> ScheduleState:
    """Loss weights at training progress ``t`` (clamped to [0, 1]).

    ramp: supervised weight 1; self weight Gaussian ramp-up, plateau, mirrored ramp-down.
    pretrain: self-supervised only before ``switch``, supervised only after.
    smooth: smoothstep hand-over from self to supervised between ``smooth_start`` and ``smooth_end``.
    """
    t = min(max(float(t), 0.0), 1.0)
    if mode == "ramp":
        if t < cfg.ramp_up:
            w = _gauss_ramp(t / cfg.ramp_up)
        elif t > 1.0 - cfg.ramp_down:
            w = _gauss_ramp((1.0 - t) / cfg.ramp_down)
        else:
            w = 1.0
        return ScheduleState(t, w, 1.0)
    if mode == "pretrain":
        return ScheduleState(t, 1.0, 0.0) if t < cfg.switch else ScheduleState(t, 0.0, 1.0)
    if mode == "smooth":
        x = min(max((t - cfg.smooth_start) / (cfg.smooth_end - cfg.smooth_start), 0.0), 1.0)
        s = 3 * x * x - 2 * x * x * x
        return ScheduleState(t, 1.0 - s, s)
    if mode == "sup":
        return ScheduleState(t, 0.0, 1.0)
    if mode == "self":
        return ScheduleState(t, 1.0, 0.0)
    raise ValueError(f"unknown schedule {mode!r}")
