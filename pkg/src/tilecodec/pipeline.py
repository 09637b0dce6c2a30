"""Whole-image encode/decode over a fixed 32x32 tile grid.

Tiles are coded in raster order, each predicted from already decoded
neighbours and refined by the residual coder.  Only the above-left, above
and left neighbours are read, so every anti-diagonal of the grid can be
processed concurrently; results do not depend on the thread count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bitstream import (
    MODE_ADAPTIVE,
    MODE_CONSTANT,
    StreamHeader,
    encode_target,
    read_stream,
    write_stream,
)
from .errors import ModelMismatchError, ShapeError
from .model import TILE, CodecModel
from .predictor import build_context, normalize, predict_tile
from .residual import K_MAX, decode_residual, iterate_residual, quantize_output

K_MIN = 0

Quality = Callable[[np.ndarray, np.ndarray], float]


@dataclass(frozen=True)
class EncodeConfig:
    """``mode`` is "constant" (``k`` iterations per tile) or "adaptive" (per-tile ``target_psnr`` in dB)."""

    mode: str = "constant"
    k: int | None = None
    target_psnr: float | None = None

    def __post_init__(self):
        if self.mode == "constant":
            if self.k is None or not K_MIN <= self.k <= K_MAX:
                raise ValueError(f"constant mode needs k in [{K_MIN}, {K_MAX}], got {self.k}")
        elif self.mode == "adaptive":
            if self.target_psnr is None or not 0 <= self.target_psnr < 100:
                raise ValueError(f"adaptive mode needs a target PSNR in [0, 100) dB, got {self.target_psnr}")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def constant(cls, k: int) -> "EncodeConfig":
        return cls("constant", k=k)

    @classmethod
    def adaptive(cls, target_psnr: float) -> "EncodeConfig":
        return cls("adaptive", target_psnr=target_psnr)


@dataclass
class EncodedImage:
    data: bytes
    plan: np.ndarray  # rows x cols iteration counts
    reconstruction: np.ndarray  # what decode_image will return
    width: int
    height: int

    @property
    def bpp(self) -> float:
        return len(self.data) * 8 / (self.width * self.height)

    @property
    def payload_bpp(self) -> float:
        return int(self.plan.sum()) * 128 / (self.width * self.height)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(255^2 / MSE) over all samples; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: image shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10 * math.log10(255.0**2 / mse)


def pad_to_tiles(img: np.ndarray) -> np.ndarray:
    """Edge-replicate so both dimensions are multiples of the tile size."""
    h, w = img.shape[:2]
    ph, pw = (-h) % TILE, (-w) % TILE
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")


def reconstruct(pred_norm: np.ndarray, residual: np.ndarray | None) -> np.ndarray:
    """8-bit tile from the normalized quantized prediction and decoded residual J."""
    if residual is None:
        residual = np.zeros_like(pred_norm)
    return quantize_output(pred_norm + residual)


def predict_quantized(decoded: np.ndarray, row: int, col: int, model: CodecModel) -> np.ndarray:
    """Context prediction for one tile, returned in normalized space after 8-bit rounding."""
    pred = predict_tile(build_context(decoded, row, col), model)
    return normalize(quantize_output(pred))


def allocate_adaptive(
    original: np.ndarray,
    pred_norm: np.ndarray,
    target_psnr: float,
    model: CodecModel,
    valid: tuple[int, int] | None = None,
    quality: Quality = psnr,
) -> tuple[int, list[np.ndarray], np.ndarray]:
    """Fewest iterations whose reconstruction reaches ``target_psnr``.

    ``original`` is the 32x32x3 uint8 tile; only its top-left ``valid``
    (height, width) region is scored.  Returns (k, codes, reconstructed tile);
    k is K_MAX if the target is never reached.
    """
    vh, vw = valid or (TILE, TILE)
    orig_valid = original[:vh, :vw]
    recon = reconstruct(pred_norm, None)
    if quality(orig_valid, recon[:vh, :vw]) >= target_psnr:
        return 0, [], recon
    r0 = normalize(original) - pred_norm
    codes = []
    for it in iterate_residual(r0, model):
        codes.append(it.code)
        recon = reconstruct(pred_norm, it.reconstruction)
        if len(codes) == K_MAX or quality(orig_valid, recon[:vh, :vw]) >= target_psnr:
            return len(codes), codes, recon
    raise AssertionError("unreachable")


def _wavefronts(rows: int, cols: int):
    for d in range(rows + cols - 1):
        yield [(r, d - r) for r in range(max(0, d - cols + 1), min(rows, d + 1))]


def _run(tasks, fn, threads: int) -> None:
    if threads <= 1:
        for rows_cols in tasks:
            for rc in rows_cols:
                fn(*rc)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for wave in tasks:
            list(pool.map(lambda rc: fn(*rc), wave))


def encode_image(img: np.ndarray, cfg: EncodeConfig, model: CodecModel, threads: int = 1) -> EncodedImage:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeError(f"expected height x width x 3 uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ShapeError("cannot encode an empty image")
    padded = pad_to_tiles(img)
    rows, cols = padded.shape[0] // TILE, padded.shape[1] // TILE
    decoded = np.zeros_like(padded)
    plan = np.zeros((rows, cols), np.uint8)
    codes: list[list[np.ndarray]] = [[] for _ in range(rows * cols)]

    def code_tile(r: int, c: int) -> None:
        ys, xs = r * TILE, c * TILE
        original = padded[ys : ys + TILE, xs : xs + TILE]
        pred_norm = predict_quantized(decoded, r, c, model)
        if cfg.mode == "constant":
            k, tile_codes, residual = cfg.k, [], None
            if k:
                gen = iterate_residual(normalize(original) - pred_norm, model)
                for _ in range(k):
                    it = next(gen)
                    tile_codes.append(it.code)
                residual = it.reconstruction
            recon = reconstruct(pred_norm, residual)
        else:
            valid = (min(TILE, h - ys), min(TILE, w - xs))
            k, tile_codes, recon = allocate_adaptive(original, pred_norm, cfg.target_psnr, model, valid)
        plan[r, c] = k
        codes[r * cols + c] = tile_codes
        decoded[ys : ys + TILE, xs : xs + TILE] = recon

    _run(_wavefronts(rows, cols), code_tile, threads)
    if cfg.mode == "constant":
        header = StreamHeader(w, h, MODE_CONSTANT, cfg.k, model.digest)
    else:
        header = StreamHeader(w, h, MODE_ADAPTIVE, encode_target(cfg.target_psnr), model.digest)
    data = write_stream(header, plan.reshape(-1), codes)
    return EncodedImage(data, plan, decoded[:h, :w].copy(), w, h)


def decode_image(data: bytes, model: CodecModel, threads: int = 1) -> np.ndarray:
    header, plan, codes = read_stream(data)
    if header.model_digest != model.digest:
        raise ModelMismatchError(
            f"stream was encoded with model {header.model_digest.hex()}, got model {model.digest.hex()}"
        )
    rows, cols = header.grid
    decoded = np.zeros((rows * TILE, cols * TILE, 3), np.uint8)

    def decode_tile(r: int, c: int) -> None:
        pred_norm = predict_quantized(decoded, r, c, model)
        tile_codes = codes[r * cols + c]
        residual = decode_residual(tile_codes, model) if tile_codes else None
        decoded[r * TILE : (r + 1) * TILE, c * TILE : (c + 1) * TILE] = reconstruct(pred_norm, residual)

    _run(_wavefronts(rows, cols), decode_tile, threads)
    return decoded[: header.height, : header.width].copy()
