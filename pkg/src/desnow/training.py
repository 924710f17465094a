"""Joint training of the reconstruction and difficulty networks, plus inference helpers."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import Adam, Tensor, no_grad
from .engine.tensor import NonFiniteError
from .geom import NOISE, RangeImage
from .losses import (
    ScheduleConfig,
    blank,
    loss_self_mhl,
    loss_sup,
    min_hypothesis_error,
    sample_blank_mask,
    schedule,
)
from .model import DesnowModel, ModelConfig

logger = logging.getLogger(__name__)

MODES = ("self", "semi", "sup")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    blank_ratio: float = 0.5
    hypotheses: int = 3
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 1
    mode: str = "self"
    schedule: str = "smooth"
    range_scale: float = 100.0
    seed: int = 0
    flip: bool = True
    width: int = 32
    n_blocks: int = 6
    n_encoder_blocks: int = 4
    schedule_cfg: ScheduleConfig = field(default_factory=ScheduleConfig)
    log_every: int = 50

    def __post_init__(self):
        if not 0 < self.blank_ratio < 1:
            raise ValueError("blank_ratio must lie in (0, 1)")
        if not self.range_scale > 0:
            raise ValueError("range_scale must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def model_config(self, input_shape) -> ModelConfig:
        return ModelConfig(
            width=self.width,
            n_blocks=self.n_blocks,
            n_encoder_blocks=self.n_encoder_blocks,
            hypotheses=self.hypotheses,
            semi=self.mode in ("semi", "sup"),
            range_scale=self.range_scale,
            input_shape=tuple(input_shape),
            seed=self.seed,
        )


@dataclass
class HistoryRow:
    step: int
    l_self: float
    l_sup: float
    w_self: float
    w_sup: float


def write_history_csv(path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "L_self", "L_sup", "w_self", "w_sup"])
        for h in history:
            w.writerow([h.step, repr(h.l_self), repr(h.l_sup), repr(h.w_self), repr(h.w_sup)])


def _self_loss(model: DesnowModel, imgs: list[RangeImage], masks: list[np.ndarray]):
    scale = model.cfg.range_scale
    blanked = [blank(im, m) for im, m in zip(imgs, masks)]
    x_tilde = model.encode_input(np.stack([b.rng for b in blanked]), np.stack([b.valid for b in blanked]))
    x = model.encode_input(np.stack([im.rng for im in imgs]), np.stack([im.valid for im in imgs]))
    thetas = model.reconstruct(x_tilde)
    phi = model.difficulty_map(x)
    target = np.stack([im.rng for im in imgs]) / scale
    mask = np.stack(masks)
    total = loss_self_mhl(thetas, target, phi, mask)
    n = max(int(mask.sum()), 1)
    return total * (1.0 / n)


def _sup_loss(model: DesnowModel, imgs: list[RangeImage], labels: list[np.ndarray]):
    x = model.encode_input(np.stack([im.rng for im in imgs]), np.stack([im.valid for im in imgs]))
    logits = model.class_logits(x)
    return loss_sup(logits, np.stack(labels))


def train(images: Sequence[RangeImage], cfg: TrainConfig, labels: Optional[Sequence[Optional[np.ndarray]]] = None,
          model: Optional[DesnowModel] = None) -> tuple[DesnowModel, list[HistoryRow]]:
    """Train on ``images``; ``labels[i]`` (or None) supplies ground truth for the supervised term.

    Every step draws a batch, optionally flips it in azimuth, samples a fresh
    blank mask per image and takes one Adam step on all parameters.  Losses are
    averaged per masked / labeled pixel.  In semi and sup modes the supervised
    batch is drawn from the labeled subset independently of the self batch.
    """
    if len(images) == 0:
        raise ValueError("need at least one training scan")
    shape = images[0].shape
    if model is None:
        model = DesnowModel(cfg.model_config(shape))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    gen = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    labeled_idx = []
    if cfg.mode in ("semi", "sup"):
        if labels is None:
            raise ValueError(f"mode {cfg.mode!r} needs labels")
        labeled_idx = [i for i, lab in enumerate(labels) if lab is not None]
        if not labeled_idx:
            raise ValueError("no labeled scans")
    sched_name = {"self": "self", "sup": "sup"}.get(cfg.mode, cfg.schedule)

    history: list[HistoryRow] = []
    t0 = time.time()
    for step in range(cfg.steps):
        st = schedule(sched_name, step / max(cfg.steps - 1, 1), cfg.schedule_cfg)
        opt.zero_grad()
        total = None
        l_self = l_sup = 0.0
        try:
            if st.w_self > 0:
                idx = gen.integers(len(images), size=cfg.batch_size)
                flips = gen.random(cfg.batch_size) < 0.5 if cfg.flip else np.zeros(cfg.batch_size, bool)
                imgs = [images[i].flip() if f else images[i] for i, f in zip(idx, flips)]
                masks = [sample_blank_mask(im.valid, cfg.blank_ratio, gen) for im in imgs]
                ls = _self_loss(model, imgs, masks)
                l_self = ls.item()
                total = ls * st.w_self
            if st.w_sup > 0:
                idx = gen.choice(labeled_idx, size=cfg.batch_size)
                flips = gen.random(cfg.batch_size) < 0.5 if cfg.flip else np.zeros(cfg.batch_size, bool)
                imgs, labs = [], []
                for i, f in zip(idx, flips):
                    im, lab = images[i], labels[i]
                    if f:
                        im, lab = im.flip(), lab[:, ::-1].copy()
                    imgs.append(im)
                    labs.append(lab)
                lsup = _sup_loss(model, imgs, labs)
                l_sup = lsup.item()
                total = lsup * st.w_sup if total is None else total + lsup * st.w_sup
        except NonFiniteError as e:
            pixel = e.index[-2:] if len(e.index) >= 2 else e.index
            raise TrainingError(f"non-finite loss at step {step}, pixel {pixel}") from e
        if total is not None:
            total.backward()
            opt.step()
        history.append(HistoryRow(step, l_self, l_sup, st.w_self, st.w_sup))
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d  L_self %.5f  L_sup %.5f  w=(%.3f, %.3f)  %.1fs",
                        step, l_self, l_sup, st.w_self, st.w_sup, time.time() - t0)
    return model, history


def infer_difficulty(model: DesnowModel, img: RangeImage) -> np.ndarray:
    """Difficulty score per pixel on the unblanked image; NaN marks pixels without a return."""
    model.check_shape(img.shape)
    out = np.full(img.shape, np.nan)
    if not img.valid.any():
        return out
    with no_grad():
        phi = model.difficulty_map(model.encode_input(img.rng, img.valid)).data[0]
    out[img.valid] = phi[img.valid]
    return out


def infer_noise_probability(model: DesnowModel, img: RangeImage) -> np.ndarray:
    """Classifier-head noise probability; NaN on invalid pixels."""
    model.check_shape(img.shape)
    out = np.full(img.shape, np.nan)
    if not img.valid.any():
        return out
    with no_grad():
        logits = model.class_logits(model.encode_input(img.rng, img.valid)).data[0]
    z = logits[1] - logits[0]
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    out[img.valid] = p[img.valid]
    return out


def reconstruction_error(model: DesnowModel, images: Sequence[RangeImage], ratio: float = 0.5,
                         seed: int = 0, pixel_filter: Optional[Sequence[np.ndarray]] = None) -> float:
    """Mean best-hypothesis error in meters over blanked pixels (optionally restricted by ``pixel_filter``)."""
    gen = np.random.default_rng(seed)
    total, count = 0.0, 0
    scale = model.cfg.range_scale
    with no_grad():
        for i, im in enumerate(images):
            mask = sample_blank_mask(im.valid, ratio, gen)
            b = blank(im, mask)
            thetas = model.reconstruct(model.encode_input(b.rng, b.valid))
            c, _ = min_hypothesis_error(thetas, (im.rng / scale)[None])
            sel = mask if pixel_filter is None else mask & pixel_filter[i]
            total += float(c.data[0][sel].sum()) * scale
            count += int(sel.sum())
    return total / max(count, 1)
