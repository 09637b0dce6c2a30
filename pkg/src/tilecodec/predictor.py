"""Spatial context prediction of a tile from its decoded upper/left neighbours."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ModelError, ShapeError
from .layers import channelwise_fc
from .model import CONTEXT, PIXEL_OFFSET, PIXEL_SCALE, TILE, CodecModel
from .tensor import Tensor


def normalize(pixels: np.ndarray) -> np.ndarray:
    """8-bit values to network space."""
    return ((np.asarray(pixels, dtype=np.float32) - np.float32(PIXEL_OFFSET)) / np.float32(PIXEL_SCALE)).astype(
        np.float32
    )


def mask_target(ctx: np.ndarray) -> np.ndarray:
    """Copy of ``ctx`` (..., 64, 64, 3) with the bottom-right quadrant set to 0."""
    out = np.array(ctx, dtype=np.float32, copy=True)
    out[..., TILE:, TILE:, :] = 0.0
    return out


def forward(model: CodecModel, ctx: Tensor) -> Tensor:
    """Batched predictor: B x 64 x 64 x 3 context -> B x 32 x 32 x 3 in [-1, 1].

    The caller is responsible for masking the target quadrant; training
    batches and :func:`predict_tile` both do.
    """
    arch = model.arch.predictor
    h = ctx
    for n in range(1, len(arch.enc_depths) + 1):
        h = T.leaky_relu(T.conv2d(h, model[f"ctx.conv{n}.w"], model[f"ctx.conv{n}.b"], stride=2), arch.leak)
    h = T.relu(channelwise_fc(h, model["ctx.cfc.depthwise"], model["ctx.cfc.pointwise"]))
    for n in range(1, len(arch.dec_depths) + 1):
        h = T.relu(T.conv2d_transpose(h, model[f"ctx.up{n}.w"], model[f"ctx.up{n}.b"], stride=2))
    out = T.add_bias(T.pointwise_conv2d(h, model["ctx.out.w"]), model["ctx.out.b"])
    return T.tanh_act(out)


def predict_tile(ctx: np.ndarray, model: CodecModel) -> np.ndarray:
    """Predict the 32x32x3 lower-right quadrant of one normalized 64x64x3 context patch."""
    if model is None:
        raise ModelError("predict_tile needs a loaded CodecModel")
    ctx = np.asarray(ctx)
    if ctx.shape != (CONTEXT, CONTEXT, 3):
        raise ShapeError(f"context patch must be {CONTEXT}x{CONTEXT}x3, got {ctx.shape}")
    with T.no_grad():
        out = forward(model, T.Tensor(mask_target(ctx)[None]))
    return out.data[0]


def build_context(decoded: np.ndarray, tile_row: int, tile_col: int) -> np.ndarray:
    """64x64x3 normalized context whose bottom-right quadrant is tile (row, col).

    Only the three raster predecessors (above-left, above, left) are read;
    anything outside the image and the target itself stays at 0 (mid-gray).
    """
    h, w = decoded.shape[:2]
    rows, cols = -(-h // TILE), -(-w // TILE)
    if not (0 <= tile_row < rows and 0 <= tile_col < cols):
        raise IndexError(f"tile ({tile_row}, {tile_col}) outside {rows}x{cols} grid")
    ctx = np.zeros((CONTEXT, CONTEXT, 3), dtype=np.float32)
    y0, x0 = (tile_row - 1) * TILE, (tile_col - 1) * TILE
    for dy, dx in ((0, 0), (0, 1), (1, 0)):
        r, c = tile_row - 1 + dy, tile_col - 1 + dx
        if r < 0 or c < 0:
            continue
        ys, xs = y0 + dy * TILE, x0 + dx * TILE
        block = decoded[ys : ys + TILE, xs : xs + TILE]
        ctx[dy * TILE : dy * TILE + block.shape[0], dx * TILE : dx * TILE + block.shape[1]] = normalize(block)
    return ctx
