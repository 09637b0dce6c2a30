import numpy as np
import pytest

from tilecodec import predictor as P
from tilecodec import tensor as T
from tilecodec.errors import ModelError, ShapeError
from tilecodec.model import CodecModel

from fd import numeric_grad, rel_err
from helpers import TINY_ARCH


def test_normalize_endpoints():
    np.testing.assert_allclose(P.normalize(np.array([0, 128, 255], np.uint8)), [-128 / 142, 0, 127 / 142], rtol=1e-6)
    assert P.normalize(np.zeros(1, np.uint8)).dtype == np.float32


def test_predict_tile_shape_and_range(tiny_model, rng):
    out = P.predict_tile(rng.uniform(-1, 1, (64, 64, 3)), tiny_model)
    assert out.shape == (32, 32, 3)
    assert np.all(np.abs(out) <= 1)


def test_predict_tile_ignores_target_quadrant(tiny_model, rng):
    ctx = rng.uniform(-1, 1, (64, 64, 3))
    base = P.predict_tile(ctx, tiny_model)
    ctx[32:, 32:] = rng.uniform(-1, 1, (32, 32, 3))
    np.testing.assert_array_equal(P.predict_tile(ctx, tiny_model), base)


def test_predict_tile_uses_known_context(tiny_model, rng):
    ctx = rng.uniform(-1, 1, (64, 64, 3))
    base = P.predict_tile(ctx, tiny_model)
    ctx[:32, :32] += 0.5
    assert not np.array_equal(P.predict_tile(ctx, tiny_model), base)


def test_predict_tile_errors(tiny_model):
    with pytest.raises(ShapeError):
        P.predict_tile(np.zeros((32, 32, 3)), tiny_model)
    with pytest.raises(ModelError):
        P.predict_tile(np.zeros((64, 64, 3)), None)


def test_build_context_first_tile_is_gray():
    decoded = np.full((64, 64, 3), 200, np.uint8)
    np.testing.assert_array_equal(P.build_context(decoded, 0, 0), 0)


def test_build_context_copies_predecessors():
    decoded = np.zeros((96, 96, 3), np.uint8)
    decoded[0:32, 0:32] = 10  # above-left of (1, 1)
    decoded[0:32, 32:64] = 20  # above
    decoded[32:64, 0:32] = 30  # left
    decoded[32:64, 32:64] = 99  # target itself: must not leak
    decoded[0:32, 64:96] = 77  # above-right: not used
    ctx = P.build_context(decoded, 1, 1)
    np.testing.assert_allclose(ctx[:32, :32], P.normalize(np.uint8(10)))
    np.testing.assert_allclose(ctx[:32, 32:], P.normalize(np.uint8(20)))
    np.testing.assert_allclose(ctx[32:, :32], P.normalize(np.uint8(30)))
    np.testing.assert_array_equal(ctx[32:, 32:], 0)


def test_build_context_edges():
    decoded = np.full((64, 96, 3), 50, np.uint8)
    ctx = P.build_context(decoded, 0, 2)  # top row: only the left neighbour exists
    assert not ctx[:32].any()
    np.testing.assert_allclose(ctx[32:, :32], P.normalize(np.uint8(50)))
    with pytest.raises(IndexError):
        P.build_context(decoded, 2, 0)


def test_predictor_end_to_end_gradient(rng):
    model = CodecModel.initialize(TINY_ARCH, 11)
    with T.precision(np.float64):
        # random biases keep pre-activations off the exact ReLU kink at 0
        params = {
            n: T.Tensor(t.data * 20 + (rng.normal(0, 0.3, t.shape) if n.endswith(".b") else 0), requires_grad=True)
            for n, t in model.named("ctx.")
        }
        model.params.update(params)
        ctx = T.Tensor(P.mask_target(rng.uniform(-1, 1, (2, 64, 64, 3))).astype(np.float64))
        target = T.Tensor(rng.uniform(-0.5, 0.5, (2, 32, 32, 3)))
        proj = T.Tensor(rng.standard_normal((2, 32, 32, 3)))

        def loss():
            return T.sum_(T.mul(T.sub(P.forward(model, ctx), target), proj))

        T.backward(loss())
        for name in ("ctx.conv1.w", "ctx.cfc.depthwise", "ctx.up3.b", "ctx.out.w"):
            idx, num = numeric_grad(lambda: loss().item(), params[name].data, eps=1e-7, sample=12, rng=rng)
            assert rel_err(params[name].grad.reshape(-1)[idx], num) < 1e-3, name
