"""Composite layers: convolutional LSTM, channel-wise fully-connected block, binarizers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

#: Bits emitted per tile per iteration (4 x 4 spatial x 8 deep).
BITS_PER_ITERATION = 128


@dataclass
class ConvLstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, height: int, width: int, depth: int) -> "ConvLstmState":
        shape = (batch, height, width, depth)
        return cls(T.Tensor(np.zeros(shape)), T.Tensor(np.zeros(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.hidden.shape


@dataclass
class LstmParams:
    """Gate weights for one ConvLSTM layer, gates stacked i, f, o, g on the depth axis."""

    input_weights: Tensor  # (k, k, in_depth, 4 * depth)
    hidden_weights: Tensor  # (1, 1, depth, 4 * depth)
    bias: Tensor  # (4 * depth,)

    @property
    def depth(self) -> int:
        return self.bias.shape[0] // 4


def conv_lstm_step(
    x: Tensor, state: ConvLstmState, params: LstmParams, stride: int = 2, upsample: bool = False
) -> tuple[Tensor, ConvLstmState]:
    """One ConvLSTM update.

    The input path is a strided convolution (or a strided transposed
    convolution when ``upsample``); the recurrent path is 1x1 on the hidden
    state, which already has the output resolution.
    """
    conv = T.conv2d_transpose if upsample else T.conv2d
    gx = conv(x, params.input_weights, params.bias, stride=stride)
    if gx.shape[:3] != state.shape[:3] or state.shape[3] != params.depth:
        raise ShapeError(f"conv_lstm_step: state shape {state.shape} does not match gate output {gx.shape}")
    gates = T.add(gx, T.pointwise_conv2d(state.hidden, params.hidden_weights))
    cell = T.lstm_cell_state(gates, state.cell)
    hidden = T.lstm_hidden(gates, cell)
    return hidden, ConvLstmState(hidden, cell)


def channelwise_param_count(depth: int, side: int = 4) -> int:
    return side * side * depth * side * side + depth * depth


def channelwise_fc(x: Tensor, depthwise: Tensor, pointwise: Tensor) -> Tensor:
    """Dense map over the spatial positions of each channel, then a 1x1 channel mix.

    ``depthwise`` is (s, s, depth, s*s): a full-extent depthwise convolution
    whose s*s outputs per channel are folded back onto the s x s grid.
    """
    b, h, w, c = x.shape
    if h != w or depthwise.shape != (h, w, c, h * w) or pointwise.shape != (1, 1, c, c):
        raise ShapeError(
            f"channelwise_fc: input {x.shape} incompatible with depthwise {depthwise.shape} "
            f"and pointwise {pointwise.shape}"
        )
    y = T.depthwise_conv2d(x, depthwise, padding="valid")  # b x 1 x 1 x (c*h*w)
    y = T.transpose(T.reshape(y, (b, c, h, w)), (0, 2, 3, 1))
    return T.pointwise_conv2d(y, pointwise)


def binarize_stochastic(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample b = +1 with probability (1 + tanh x) / 2, else -1.

    The returned tensor back-propagates as tanh(x) would.
    """
    t = T.tanh_act(x)
    u = rng.random(x.shape, dtype=np.float64)
    bits = np.where(u < 0.5 * (1.0 + t.data.astype(np.float64)), 1.0, -1.0)
    return T.straight_through(t, bits)


def binarize_deterministic(x: Tensor) -> Tensor:
    """sign(tanh x) with zero mapped to +1."""
    return T.straight_through(T.tanh_act(x), np.where(x.data >= 0, 1.0, -1.0))


def code_to_bits(code: Tensor | np.ndarray) -> np.ndarray:
    """Flatten a 1 x 4 x 4 x 8 code (row-major, depth fastest) to 128 int8 values in {-1, +1}."""
    data = code.data if isinstance(code, Tensor) else np.asarray(code)
    bits = data.reshape(-1).astype(np.int8)
    if bits.size != BITS_PER_ITERATION:
        raise ShapeError(f"code has {bits.size} values, expected {BITS_PER_ITERATION}")
    return bits


def bits_to_code(bits: np.ndarray, shape=(1, 4, 4, 8)) -> Tensor:
    bits = np.asarray(bits)
    if bits.size != BITS_PER_ITERATION:
        raise ShapeError(f"code has {bits.size} values, expected {BITS_PER_ITERATION}")
    if not np.all(np.abs(bits) == 1):
        raise ValueError("code values must be -1 or +1")
    return T.Tensor(bits.reshape(shape))
