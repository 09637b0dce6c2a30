"""Desk-scale training: Adam, staircase learning-rate decay, hard-patch mining."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import predictor
from . import tensor as T
from .errors import ModelError
from .image_io import png_size
from .model import CONTEXT, TILE, TOY_ARCH, Architecture, CodecModel
from .residual import quantize_output, unroll

log = logging.getLogger(__name__)

#: Learning rate as published; unstable for this engine at toy scale.
PUBLISHED_LR = 0.5
#: Desk-scale defaults per phase (Adam, same staircase shape).
TOY_LR = {"context": 1e-3, "residual": 3e-3}


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float | None = None  # None: TOY_LR[phase]
    decay: float = 0.95
    decay_step: int = 20_000
    steps: int = 2_000
    seed: int = 0
    phase: str = "context"
    unroll: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.phase not in ("context", "residual"):
            raise ValueError(f"phase must be 'context' or 'residual', got {self.phase!r}")
        if self.lr0 is None:
            self.lr0 = TOY_LR[self.phase]
        for name in ("batch_size", "decay", "decay_step", "unroll"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr0 < 0 or self.steps < 0:
            raise ValueError("lr0 and steps must be non-negative")

    @classmethod
    def as_published(cls, **kw) -> "TrainConfig":
        return cls(lr0=PUBLISHED_LR, **kw)


def lr_schedule(step: int, lr0: float = PUBLISHED_LR, decay: float = 0.95, decay_step: int = 20_000) -> float:
    """Staircase exponential decay: lr0 * decay ** (step // decay_step)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return lr0 * decay ** (step // decay_step)


class Adam:
    def __init__(self, params: Sequence[T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PatchRecord:
    pixels: np.ndarray  # 64 x 64 x 3 uint8
    source: str
    position: tuple[int, int]
    difficulty: int


def select_patches(image: np.ndarray, n: int = 100, source: str = "") -> list[PatchRecord]:
    """The ``n`` 64x64 crops (on a stride-32 grid) with the largest PNG size.

    Ties keep raster order of the crop position.
    """
    h, w = image.shape[:2]
    if h < CONTEXT or w < CONTEXT:
        raise ValueError(f"image {w}x{h} smaller than a {CONTEXT}x{CONTEXT} patch")
    cands = []
    for y in range(0, h - CONTEXT + 1, TILE):
        for x in range(0, w - CONTEXT + 1, TILE):
            crop = np.ascontiguousarray(image[y : y + CONTEXT, x : x + CONTEXT])
            cands.append(PatchRecord(crop, source, (y, x), png_size(crop)))
    cands.sort(key=lambda r: (-r.difficulty, r.position))
    return cands[:n]


def build_corpus(images: Iterable[tuple[str, np.ndarray]], per_image: int = 100) -> list[PatchRecord]:
    out: list[PatchRecord] = []
    for name, img in images:
        out.extend(select_patches(img, per_image, name))
    return out


def stack_patches(patches: Sequence[PatchRecord]) -> np.ndarray:
    if not patches:
        raise ValueError("empty patch corpus")
    return np.stack([p.pixels for p in patches])


def _batches(n: int, batch: int, steps: int, rng: np.random.Generator):
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos : pos + min(batch, n)]
        pos += batch


def _log_line(sink: TextIO | None, **record) -> None:
    if sink is not None:
        sink.write(json.dumps(record) + "\n")
        sink.flush()


def context_batch(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked normalized contexts and their normalized target quadrants."""
    norm = predictor.normalize(pixels)
    return predictor.mask_target(norm), np.ascontiguousarray(norm[:, TILE:, TILE:, :])


def context_loss(model: CodecModel, pixels: np.ndarray) -> T.Tensor:
    ctx, target = context_batch(pixels)
    return T.l1_loss(predictor.forward(model, T.Tensor(ctx)), T.Tensor(target))


def train_context(
    patches: Sequence[PatchRecord] | np.ndarray,
    cfg: TrainConfig,
    model: CodecModel | None = None,
    arch: Architecture = TOY_ARCH,
    log_file: TextIO | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> CodecModel:
    """Fit the context predictor by Adam on mean L1 over the target quadrant."""
    pixels = patches if isinstance(patches, np.ndarray) else stack_patches(patches)
    if len(pixels) == 0:
        raise ValueError("empty patch corpus")
    model = model.copy() if model is not None else CodecModel.initialize(arch, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    params = [t for _, t in model.named("ctx.")]
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    loss_value = float("nan")
    for p in params:
        p.requires_grad = True
    try:
        for step, idx in enumerate(_batches(len(pixels), cfg.batch_size, cfg.steps, rng)):
            lr = lr_schedule(step, cfg.lr0, cfg.decay, cfg.decay_step)
            opt.zero_grad()
            loss = context_loss(model, pixels[idx])
            T.backward(loss)
            opt.step(lr)
            loss_value = loss.item()
            _log_line(log_file, phase="context", step=step, lr=lr, loss=loss_value)
            if callback:
                callback(step, loss_value)
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    model.meta.setdefault("steps", {})["context"] = cfg.steps
    model.meta.setdefault("final_loss", {})["context"] = loss_value
    return model


def residual_targets(model: CodecModel, pixels: np.ndarray, batch: int = 64) -> np.ndarray:
    """R_0 for each patch: true quadrant minus the 8-bit-quantized frozen prediction."""
    out = np.empty((len(pixels), TILE, TILE, 3), np.float32)
    with T.no_grad():
        for s in range(0, len(pixels), batch):
            ctx, _ = context_batch(pixels[s : s + batch])
            pred = predictor.forward(model, T.Tensor(ctx)).data
            q = quantize_output(pred)
            out[s : s + batch] = predictor.normalize(pixels[s : s + batch, TILE:, TILE:]) - predictor.normalize(q)
    return out


def residual_loss(
    model: CodecModel, r0: np.ndarray, iterations: int, rng=None, mode="stochastic", noise=None
) -> T.Tensor:
    """Sum over iterations of mean |R_0 - J_i|."""
    r = T.Tensor(r0)
    _, recons = unroll(model, r, iterations, mode=mode, rng=rng, noise=noise)
    total = None
    for j in recons:
        term = T.l1_loss(r, j)
        total = term if total is None else T.add(total, term)
    return total


def train_residual(
    patches: Sequence[PatchRecord] | np.ndarray,
    context_model: CodecModel | None,
    cfg: TrainConfig,
    log_file: TextIO | None = None,
    callback: Callable[[int, float], None] | None = None,
    targets: np.ndarray | None = None,
) -> CodecModel:
    """Fit the residual coder on residuals left by the frozen context predictor."""
    if context_model is None:
        raise ModelError("residual training needs a trained context model")
    pixels = patches if isinstance(patches, np.ndarray) else stack_patches(patches)
    if len(pixels) == 0:
        raise ValueError("empty patch corpus")
    model = context_model.copy()
    if targets is None:
        targets = residual_targets(model, pixels)
    rng = np.random.default_rng([cfg.seed, 2])
    params = [t for _, t in model.named("res.")]
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    loss_value = float("nan")
    for p in params:
        p.requires_grad = True
    try:
        for step, idx in enumerate(_batches(len(targets), cfg.batch_size, cfg.steps, rng)):
            lr = lr_schedule(step, cfg.lr0, cfg.decay, cfg.decay_step)
            opt.zero_grad()
            loss = residual_loss(model, targets[idx], cfg.unroll, rng)
            T.backward(loss)
            opt.step(lr)
            loss_value = loss.item()
            _log_line(log_file, phase="residual", step=step, lr=lr, loss=loss_value)
            if callback:
                callback(step, loss_value)
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    model.meta.setdefault("steps", {})["residual"] = cfg.steps
    model.meta.setdefault("final_loss", {})["residual"] = loss_value
    return model
