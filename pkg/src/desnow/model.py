"""Reconstruction network, difficulty network and the optional shared-encoder classifier.

Both networks see a two-channel image: range divided by ``range_scale`` and the
validity flag.  The reconstructor emits ``hypotheses`` candidate ranges per
pixel (normalized units), the difficulty network one log-scale score.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import Conv2d, Module, ResidualBlock, Tensor, leaky_relu
from .engine.layers import LEAKY_SLOPE
from .geom import RangeImage

CHECKPOINT_FORMAT = "desnow-checkpoint-1"


@dataclass
class ModelConfig:
    width: int = 32
    n_blocks: int = 6
    n_encoder_blocks: int = 4
    kernel: int = 3
    hypotheses: int = 3
    semi: bool = False
    range_scale: float = 100.0
    input_shape: Optional[tuple] = None
    seed: int = 0
    # output-bias priors; None derives them from range_scale (0.5 m typical error, 20 m typical range)
    difficulty_bias: Optional[float] = None
    reconstruction_bias: Optional[float] = None

    def __post_init__(self):
        if self.hypotheses < 1:
            raise ValueError("need at least one hypothesis")
        if not 0 <= self.n_encoder_blocks <= self.n_blocks:
            raise ValueError("encoder blocks must be within [0, n_blocks]")
        if not self.range_scale > 0:
            raise ValueError("range_scale must be positive")
        if self.input_shape is not None:
            self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.difficulty_bias is None:
            self.difficulty_bias = math.log(math.sqrt(2.0) * 0.5 / self.range_scale)
        if self.reconstruction_bias is None:
            self.reconstruction_bias = 20.0 / self.range_scale


class Backbone(Module):
    """Stem conv, residual stack, 1x1 head.  ``encode`` covers stem plus the first ``n_enc`` blocks."""

    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig, rng: np.random.Generator,
                 head_bias: float = 0.0):
        self.stem = Conv2d(in_ch, cfg.width, cfg.kernel, rng=rng)
        self.blocks = [ResidualBlock(cfg.width, cfg.kernel, rng=rng) for _ in range(cfg.n_blocks)]
        self.head = Conv2d(cfg.width, out_ch, 1, rng=rng)
        self.head.bias.data[:] = head_bias
        self.n_enc = cfg.n_encoder_blocks

    def encode(self, x: Tensor) -> Tensor:
        h = leaky_relu(self.stem(x), LEAKY_SLOPE)
        for blk in self.blocks[:self.n_enc]:
            h = blk(h)
        return h

    def decode(self, h: Tensor) -> Tensor:
        for blk in self.blocks[self.n_enc:]:
            h = blk(h)
        return self.head(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


class ClassifierHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [ResidualBlock(cfg.width, cfg.kernel, rng=rng)
                       for _ in range(cfg.n_blocks - cfg.n_encoder_blocks)]
        self.head = Conv2d(cfg.width, 2, 1, rng=rng)

    def forward(self, h: Tensor) -> Tensor:
        for blk in self.blocks:
            h = blk(h)
        return self.head(h)


class DesnowModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.reconstructor = Backbone(2, cfg.hypotheses, cfg, rng, cfg.reconstruction_bias)
        self.difficulty = Backbone(2, 1, cfg, rng, cfg.difficulty_bias)
        self.classifier = ClassifierHead(cfg, rng) if cfg.semi else None

    def named_parameters(self, prefix: str = ""):
        yield from self.reconstructor.named_parameters(prefix + "reconstructor.")
        yield from self.difficulty.named_parameters(prefix + "difficulty.")
        if self.classifier is not None:
            yield from self.classifier.named_parameters(prefix + "classifier.")

    def check_shape(self, shape):
        if self.cfg.input_shape is not None and tuple(shape[-2:]) != tuple(self.cfg.input_shape):
            raise ValueError(f"image shape {tuple(shape[-2:])} differs from model resolution {self.cfg.input_shape}")

    def encode_input(self, rng: np.ndarray, valid: np.ndarray) -> Tensor:
        """Stack ``(range / scale, valid)`` into a (B, 2, H, W) tensor; accepts (H, W) or (B, H, W)."""
        rng = np.asarray(rng, dtype=np.float64)
        valid = np.asarray(valid, dtype=np.float64)
        if rng.ndim == 2:
            rng, valid = rng[None], valid[None]
        self.check_shape(rng.shape)
        return Tensor(np.stack([rng / self.cfg.range_scale, valid], axis=1))

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.reconstructor(x)

    def difficulty_map(self, x: Tensor) -> Tensor:
        return self.difficulty(x)[:, 0]

    def difficulty_and_logits(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.difficulty.encode(x)
        phi = self.difficulty.decode(h)[:, 0]
        logits = self.classifier(h) if self.classifier is not None else None
        return phi, logits

    def class_logits(self, x: Tensor) -> Tensor:
        if self.classifier is None:
            raise ValueError("model was built without a classifier head")
        return self.classifier(self.difficulty.encode(x))

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def save_checkpoint(path, model: DesnowModel, step: int = 0, extra: dict | None = None) -> None:
    params, offset, blobs = [], 0, []
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        params.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": asdict(model.cfg),
        "seed": model.cfg.seed,
        "step": step,
        "params": params,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[DesnowModel, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format")
    model = DesnowModel(ModelConfig(**header["architecture"]))
    base = nl + 1
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=base + entry["offset"]).reshape(entry["shape"])
    model.load_state(state)
    return model, header


def batch_planes(images: Sequence[RangeImage]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([im.rng for im in images]), np.stack([im.valid for im in images])
