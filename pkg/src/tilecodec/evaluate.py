"""Rate-distortion sweeps, CSV export and bit-allocation maps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import CONTEXT, TILE, CodecModel
from .pipeline import EncodeConfig, EncodedImage, encode_image, pad_to_tiles, psnr, reconstruct
from .predictor import normalize, predict_tile
from .residual import K_MAX, quantize_output, iterate_residual

CSV_COLUMNS = ("image", "mode", "param", "bpp", "payload_bpp", "psnr")

Corpus = Sequence[tuple[str, np.ndarray]]


@dataclass(frozen=True)
class RdRecord:
    """One rate-distortion point.

    ``bpp`` counts every byte of the stream (header and plan table
    included); ``payload_bpp`` counts only the residual code bits.
    """

    image: str
    mode: str
    param: float
    bpp: float
    payload_bpp: float
    psnr: float


@dataclass(frozen=True)
class BitMap:
    """Per-tile iteration counts scaled to [0, 1] by the maximum count."""

    image: str
    param: float
    plan: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.plan.astype(np.float64) / K_MAX

    def to_pixels(self) -> np.ndarray:
        return np.floor(self.values * 255 + 0.5).astype(np.uint8)


def _record(name: str, img: np.ndarray, cfg: EncodeConfig, enc: EncodedImage) -> RdRecord:
    param = cfg.k if cfg.mode == "constant" else cfg.target_psnr
    return RdRecord(name, cfg.mode, param, enc.bpp, enc.payload_bpp, psnr(img, enc.reconstruction))


def _check_corpus(corpus: Corpus) -> None:
    if len(corpus) == 0:
        raise ValueError("corpus is empty")


def sweep_constant(
    corpus: Corpus, model: CodecModel, k_list: Iterable[int], threads: int = 1
) -> list[RdRecord]:
    _check_corpus(corpus)
    records = []
    for name, img in sorted(corpus, key=lambda item: item[0]):
        for k in k_list:
            cfg = EncodeConfig.constant(int(k))
            records.append(_record(name, img, cfg, encode_image(img, cfg, model, threads)))
    return records


def sweep_adaptive(
    corpus: Corpus, model: CodecModel, targets: Iterable[float], threads: int = 1
) -> tuple[list[RdRecord], list[BitMap]]:
    _check_corpus(corpus)
    records, maps = [], []
    for name, img in sorted(corpus, key=lambda item: item[0]):
        for target in targets:
            cfg = EncodeConfig.adaptive(float(target))
            enc = encode_image(img, cfg, model, threads)
            records.append(_record(name, img, cfg, enc))
            maps.append(BitMap(name, float(target), enc.plan.copy()))
    return records, maps


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _fmt_param(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def records_to_csv(records: Iterable[RdRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([r.image, r.mode, _fmt_param(r.param), _fmt(r.bpp), _fmt(r.payload_bpp), _fmt(r.psnr)])
    return buf.getvalue()


def read_csv(path) -> list[RdRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        RdRecord(r["image"], r["mode"], float(r["param"]), float(r["bpp"]), float(r["payload_bpp"]), float(r["psnr"]))
        for r in rows
    ]


def _write(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_csv(records: Iterable[RdRecord], path) -> None:
    _write(path, records_to_csv(records).encode())


def bitmap_pgm(bitmap: BitMap | np.ndarray) -> bytes:
    """Binary PGM (P5) with one pixel per tile, round(k / 16 * 255)."""
    if not isinstance(bitmap, BitMap):
        bitmap = BitMap("", 0.0, np.asarray(bitmap))
    pixels = bitmap.to_pixels()
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def export_bitmap(bitmap: BitMap | np.ndarray, path) -> None:
    _write(path, bitmap_pgm(bitmap))


@dataclass(frozen=True)
class CurvePoint:
    mode: str
    param: float
    images: int
    bpp: float
    payload_bpp: float
    psnr: float  # mean over images with finite PSNR
    inf_count: int


def summarize(records: Iterable[RdRecord]) -> list[CurvePoint]:
    """Corpus means per (mode, param), averaging per-image PSNRs.

    Infinite PSNRs are left out of the PSNR mean and counted instead.
    """
    groups: dict[tuple[str, float], list[RdRecord]] = {}
    for r in records:
        groups.setdefault((r.mode, r.param), []).append(r)
    out = []
    for (mode, param), rs in sorted(groups.items()):
        finite = [r.psnr for r in rs if not math.isinf(r.psnr)]
        out.append(
            CurvePoint(
                mode,
                param,
                len(rs),
                float(np.mean([r.bpp for r in rs])),
                float(np.mean([r.payload_bpp for r in rs])),
                float(np.mean(finite)) if finite else math.inf,
                len(rs) - len(finite),
            )
        )
    return out


# ---------------------------------------------------------------------------
# block artifacts


def encode_independent(img: np.ndarray, k: int, model: CodecModel) -> np.ndarray:
    """Reconstruction with every tile coded from an all-gray context.

    Ablation of spatial context: tiles share no information, as in a codec
    without inter-tile prediction.  Returns the cropped 8-bit image.
    """
    h, w = img.shape[:2]
    padded = pad_to_tiles(np.asarray(img))
    pred_norm = normalize(quantize_output(predict_tile(np.zeros((CONTEXT, CONTEXT, 3), np.float32), model)))
    out = np.empty_like(padded)
    for ys in range(0, padded.shape[0], TILE):
        for xs in range(0, padded.shape[1], TILE):
            tile = padded[ys : ys + TILE, xs : xs + TILE]
            residual = None
            if k:
                gen = iterate_residual(normalize(tile) - pred_norm, model)
                for _ in range(k):
                    residual = next(gen).reconstruction
            out[ys : ys + TILE, xs : xs + TILE] = reconstruct(pred_norm, residual)
    return out[:h, :w]


def blockiness(original: np.ndarray, recon: np.ndarray) -> float:
    """Mean absolute jump of the coding error across tile boundaries.

    Using the error rather than the pixels themselves keeps genuine image
    edges that happen to sit on a boundary from counting as artifacts.
    """
    err = recon.astype(np.float64) - original.astype(np.float64)
    jumps = []
    for x in range(TILE, err.shape[1], TILE):
        jumps.append(np.abs(err[:, x] - err[:, x - 1]).ravel())
    for y in range(TILE, err.shape[0], TILE):
        jumps.append(np.abs(err[y] - err[y - 1]).ravel())
    if not jumps:
        raise ValueError("image has no interior tile boundaries")
    return float(np.concatenate(jumps).mean())


def patch_psnr_curve(model: CodecModel, patches: np.ndarray, iterations: int = K_MAX, batch: int = 64) -> np.ndarray:
    """Mean PSNR of the coded target quadrant of 64x64 patches, for k = 0..iterations.

    Each patch is coded with its true (not decoded) context, as during
    training; PSNRs are per patch and then averaged.
    """
    from . import tensor as T
    from .residual import unroll
    from .train import residual_targets

    patches = np.asarray(patches)
    totals = np.zeros(iterations + 1)
    for s in range(0, len(patches), batch):
        chunk = patches[s : s + batch]
        r0 = residual_targets(model, chunk)
        orig = chunk[:, TILE:, TILE:].astype(np.float64)
        pred_norm = normalize(chunk[:, TILE:, TILE:]) - r0
        recons = [np.zeros_like(r0)]
        with T.no_grad():
            _, js = unroll(model, T.Tensor(r0), iterations, mode="deterministic")
        recons += [j.data for j in js]
        for k, j in enumerate(recons):
            err = quantize_output(pred_norm + j).astype(np.float64) - orig
            mse = np.maximum((err**2).mean(axis=(1, 2, 3)), 1e-10)
            totals[k] += (10 * np.log10(255.0**2 / mse)).sum()
    return totals / len(patches)
