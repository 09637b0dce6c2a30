import json
import io

import numpy as np
import pytest

from tilecodec import train as TR
from tilecodec.errors import ModelError
from tilecodec.image_io import png_size
from tilecodec.model import CodecModel

from helpers import TINY_ARCH, random_image


def test_lr_schedule_published_values():
    assert TR.lr_schedule(0) == 0.5
    assert TR.lr_schedule(19_999) == 0.5
    assert TR.lr_schedule(20_000) == pytest.approx(0.475, abs=1e-15)
    assert TR.lr_schedule(40_000) == pytest.approx(0.45125)
    with pytest.raises(ValueError):
        TR.lr_schedule(-1)


def test_config_validation():
    assert TR.TrainConfig.as_published().lr0 == 0.5
    with pytest.raises(ValueError):
        TR.TrainConfig(phase="both")
    with pytest.raises(ValueError):
        TR.TrainConfig(batch_size=0)


def test_adam_matches_reference(rng):
    from tilecodec import tensor as T

    w0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    with T.precision(np.float64):
        p = T.Tensor(w0.copy(), requires_grad=True)
        opt = TR.Adam([p])
        for g in grads:
            p.grad = g.copy()
            opt.step(0.1)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-10)


def test_select_patches_hardest_first(rng):
    img = np.full((128, 128, 3), 100, np.uint8)
    img[64:128, 32:96] = rng.integers(0, 256, (64, 64, 3))
    patches = TR.select_patches(img, n=3, source="s")
    assert patches[0].position == (64, 32)
    assert patches[0].difficulty == png_size(img[64:128, 32:96])
    assert [p.difficulty for p in patches] == sorted((p.difficulty for p in patches), reverse=True)
    assert all(p.pixels.shape == (64, 64, 3) and p.source == "s" for p in patches)


def test_select_patches_grid_and_ties():
    img = np.zeros((96, 96, 3), np.uint8)
    patches = TR.select_patches(img, n=100)
    assert [p.position for p in patches] == [(y, x) for y in (0, 32) for x in (0, 32)]
    with pytest.raises(ValueError):
        TR.select_patches(np.zeros((60, 200, 3), np.uint8))


def test_build_corpus_count(rng):
    images = [(f"i{n}", random_image(rng, 96, 128)) for n in range(3)]
    assert len(TR.build_corpus(images, per_image=4)) == 12


def test_context_training_reduces_loss_and_logs(rng):
    # flat patches: the target colour is visible in the context
    pixels = np.repeat(np.repeat(rng.integers(40, 220, (16, 1, 1, 3)), 64, 1), 64, 2).astype(np.uint8)
    model = CodecModel.initialize(TINY_ARCH, 0)
    before = TR.context_loss(model, pixels).item()
    log = io.StringIO()
    cfg = TR.TrainConfig(steps=30, batch_size=16, lr0=1e-2)
    trained = TR.train_context(pixels, cfg, model=model, log_file=log)
    assert TR.context_loss(trained, pixels).item() < before
    lines = [json.loads(l) for l in log.getvalue().splitlines()]
    assert len(lines) == 30 and lines[0]["phase"] == "context" and lines[0]["lr"] == 1e-2
    # residual coder untouched, input model unchanged
    assert all(np.array_equal(trained[n].data, model[n].data) for n, _ in model.named("res."))
    assert model == CodecModel.initialize(TINY_ARCH, 0)
    assert trained.meta["steps"]["context"] == 30


def test_training_is_deterministic(rng):
    pixels = np.stack([random_image(rng, 64, 64) for _ in range(8)])
    cfg = TR.TrainConfig(steps=3, batch_size=4, seed=3)
    a = TR.train_context(pixels, cfg, arch=TINY_ARCH)
    b = TR.train_context(pixels, cfg, arch=TINY_ARCH)
    assert a == b


def test_residual_training(rng):
    pixels = np.stack([random_image(rng, 64, 64) for _ in range(8)])
    ctx_model = CodecModel.initialize(TINY_ARCH, 0)
    cfg = TR.TrainConfig(steps=4, batch_size=4, phase="residual", unroll=3, lr0=1e-2)
    trained = TR.train_residual(pixels, ctx_model, cfg)
    assert all(np.array_equal(trained[n].data, ctx_model[n].data) for n, _ in ctx_model.named("ctx."))
    assert any(not np.array_equal(trained[n].data, ctx_model[n].data) for n, _ in ctx_model.named("res."))
    with pytest.raises(ModelError):
        TR.train_residual(pixels, None, cfg)


def test_residual_targets_formula(rng):
    from tilecodec import predictor
    from tilecodec.residual import quantize_output

    pixels = np.stack([random_image(rng, 64, 64) for _ in range(2)])
    model = CodecModel.initialize(TINY_ARCH, 0)
    r0 = TR.residual_targets(model, pixels)
    pred = predictor.predict_tile(predictor.normalize(pixels[1]), model)
    expected = predictor.normalize(pixels[1, 32:, 32:]) - predictor.normalize(quantize_output(pred))
    np.testing.assert_allclose(r0[1], expected, atol=1e-6)


def test_empty_corpus():
    with pytest.raises(ValueError):
        TR.train_context(np.zeros((0, 64, 64, 3), np.uint8), TR.TrainConfig(steps=1))
