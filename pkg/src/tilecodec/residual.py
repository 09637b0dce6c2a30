"""Recurrent binary autoencoder that progressively codes a tile residual.

Iteration i encodes R_i = R_0 - J_{i-1} into 128 bits; the decoder turns
those bits into a partial output P_i and J_i = P_0 + ... + P_i.  LSTM states
on both sides persist across the iterations of one tile.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import (
    BITS_PER_ITERATION,
    ConvLstmState,
    binarize_deterministic,
    binarize_stochastic,
    bits_to_code,
    code_to_bits,
    conv_lstm_step,
)
from .model import PIXEL_OFFSET, PIXEL_SCALE, TILE, CodecModel
from .tensor import Tensor

K_MAX = 16


@dataclass
class IterationOutput:
    partial: np.ndarray  # P_i, 32 x 32 x 3
    code: np.ndarray  # 128 int8 values in {-1, +1}
    reconstruction: np.ndarray  # J_i


def quantize_output(x) -> np.ndarray:
    """round(min(max(x * 142 + 128, 0), 255)) with halves rounded away from zero."""
    # float64 so that x * 142 + 128 lands on the same side of every .5 as exact arithmetic
    v = np.asarray(x, dtype=np.float64) * PIXEL_SCALE + PIXEL_OFFSET
    v = np.clip(v, 0, 255)
    # v is non-negative here, so floor(v + 0.5) rounds halves away from zero
    return np.floor(v + 0.5).astype(np.uint8)


def encoder_states(model: CodecModel, batch: int) -> list[ConvLstmState]:
    side = TILE
    states = []
    for d in model.arch.residual.enc_depths:
        side //= 2
        states.append(ConvLstmState.zeros(batch, side, side, d))
    return states


def decoder_states(model: CodecModel, batch: int) -> list[ConvLstmState]:
    side = TILE >> len(model.arch.residual.enc_depths)
    states = []
    for d in model.arch.residual.dec_depths[1:]:
        side *= 2
        states.append(ConvLstmState.zeros(batch, side, side, d))
    return states


def encoder_step(model: CodecModel, r: Tensor, states: list[ConvLstmState]) -> tuple[Tensor, list[ConvLstmState]]:
    """Residual -> pre-binarization bottleneck activations (B x 4 x 4 x 8)."""
    h = T.conv2d(r, model["res.stem.w"], model["res.stem.b"], stride=1)
    new = []
    for n, state in enumerate(states, 1):
        h, s = conv_lstm_step(h, state, model.lstm(f"res.enc{n}"), stride=2)
        new.append(s)
    x = T.add_bias(T.pointwise_conv2d(h, model["res.bits.w"]), model["res.bits.b"])
    return x, new


def decoder_step(model: CodecModel, code: Tensor, states: list[ConvLstmState]) -> tuple[Tensor, list[ConvLstmState]]:
    """Bits -> partial reconstruction P_i in [-1, 1]."""
    h = T.add_bias(T.pointwise_conv2d(code, model["res.dec0.w"]), model["res.dec0.b"])
    new = []
    for n, state in enumerate(states, 1):
        h, s = conv_lstm_step(h, state, model.lstm(f"res.dec{n}"), stride=2, upsample=True)
        new.append(s)
    out = T.add_bias(T.pointwise_conv2d(h, model["res.out.w"]), model["res.out.b"])
    return T.tanh_act(out), new


def unroll(
    model: CodecModel,
    r0: Tensor,
    iterations: int,
    mode: str = "stochastic",
    rng: np.random.Generator | None = None,
    noise: Sequence[np.ndarray] | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Run ``iterations`` encode/decode steps on a batch; returns (codes, J_i list).

    With ``noise`` given, iteration i's code is tanh(x) + noise[i] instead of
    a fresh sample; this freezes binarization for finite-difference checks.
    """
    batch = r0.shape[0]
    enc, dec = encoder_states(model, batch), decoder_states(model, batch)
    j = T.Tensor(np.zeros(r0.shape))
    codes, recons = [], []
    for i in range(iterations):
        x, enc = encoder_step(model, T.sub(r0, j), enc)
        if noise is not None:
            code = T.add(T.tanh_act(x), T.Tensor(noise[i]))
        elif mode == "stochastic":
            code = binarize_stochastic(x, rng)
        elif mode == "deterministic":
            code = binarize_deterministic(x)
        else:
            raise ValueError(f"unknown binarization mode {mode!r}")
        p, dec = decoder_step(model, code, dec)
        j = T.add(j, p)
        codes.append(code)
        recons.append(j)
    return codes, recons


def iterate_residual(
    r0: np.ndarray, model: CodecModel, mode: str = "deterministic", rng: np.random.Generator | None = None
) -> Iterator[IterationOutput]:
    """Endless stream of iterations for one 32x32x3 residual tile.

    Stopping early yields exactly the prefix of a longer run.
    """
    r0 = np.asarray(r0, dtype=np.float32)
    if r0.shape != (TILE, TILE, 3):
        raise ShapeError(f"residual tile must be {TILE}x{TILE}x3, got {r0.shape}")
    if mode == "stochastic" and rng is None:
        rng = np.random.default_rng()
    r = T.Tensor(r0[None])
    enc, dec = encoder_states(model, 1), decoder_states(model, 1)
    j = T.Tensor(np.zeros(r.shape))
    while True:
        # grad mode is restored before every yield; the caller's thread is unaffected
        with T.no_grad():
            x, enc = encoder_step(model, T.sub(r, j), enc)
            if mode == "deterministic":
                code = binarize_deterministic(x)
            elif mode == "stochastic":
                code = binarize_stochastic(x, rng)
            else:
                raise ValueError(f"unknown binarization mode {mode!r}")
            bits = code_to_bits(code)
            p, dec, j = _decode_one(model, bits, dec, j)
        yield IterationOutput(p.data[0], bits, j.data[0])


def _decode_one(model, bits, dec, j):
    p, dec = decoder_step(model, bits_to_code(bits), dec)
    return p, dec, T.add(j, p)


def encode_residual(
    r0: np.ndarray, k: int, model: CodecModel, mode: str = "deterministic", rng: np.random.Generator | None = None
) -> list[IterationOutput]:
    if not 1 <= k <= K_MAX:
        raise ValueError(f"iteration count must be in [1, {K_MAX}], got {k}")
    out = []
    for it in iterate_residual(r0, model, mode, rng):
        out.append(it)
        if len(out) == k:
            return out
    raise AssertionError("unreachable")


def decode_residual(codes: Sequence[np.ndarray], model: CodecModel) -> np.ndarray:
    """Reconstruct J_{k-1} from k codes of 128 bits each; zeros for k = 0."""
    with T.no_grad():
        dec = decoder_states(model, 1)
        j = T.Tensor(np.zeros((1, TILE, TILE, 3)))
        for bits in codes:
            bits = np.asarray(bits)
            if bits.size != BITS_PER_ITERATION:
                raise ShapeError(f"code has {bits.size} bits, expected {BITS_PER_ITERATION}")
            _, dec, j = _decode_one(model, bits, dec, j)
    return j.data[0]
