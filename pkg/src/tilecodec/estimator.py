"""scikit-learn style wrapper around training and coding.

``X`` is a sequence of height x width x 3 uint8 images (sizes may differ),
so arrays are passed through as Python lists rather than a 2-D matrix.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import bitstream, train
from .errors import ShapeError
from .model import PAPER_ARCH, TOY_ARCH, CodecModel
from .pipeline import EncodeConfig, decode_image, encode_image, psnr


def check_images(X) -> list[np.ndarray]:
    """Validate a batch of RGB uint8 images and return them as a list."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ShapeError("expected a batch of images; wrap a single image in a list")
    images = list(X)
    if not images:
        raise ValueError("empty image batch")
    out = []
    for n, img in enumerate(images):
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3 or min(img.shape[:2]) < 1:
            raise ShapeError(f"image {n}: expected height x width x 3, got {img.shape}")
        if img.dtype != np.uint8:
            if not np.issubdtype(img.dtype, np.integer) or img.min() < 0 or img.max() > 255:
                raise ValueError(f"image {n}: expected 8-bit values, got dtype {img.dtype}")
            img = img.astype(np.uint8)
        out.append(img)
    return out


class TileCodec(TransformerMixin, BaseEstimator):
    """Learned tile codec as a transformer from images to byte streams.

    Parameters
    ----------
    mode : {"constant", "adaptive"}
        Bit allocation mode used by :meth:`transform`.
    k : int
        Iterations per tile in constant mode.
    target_psnr : float
        Per-tile PSNR target (dB) in adaptive mode.
    context_steps, residual_steps : int
        Optimizer steps for the two training phases run by :meth:`fit`.
    lr : float or None
        Initial Adam learning rate for both phases; None picks the per-phase
        defaults in ``train.TOY_LR``.
    batch_size : int
    patches_per_image : int
        Hardest 64x64 crops mined per training image.
    arch : {"toy", "paper"}
        Layer widths for a freshly initialized model.
    random_state : int
    threads : int
        Wavefront worker threads for coding.
    model : CodecModel or None
        Start from these weights.  With zero training steps this simply wraps
        a pretrained model.

    Attributes
    ----------
    model_ : CodecModel
    n_patches_ : int
    """

    def __init__(
        self,
        mode: str = "constant",
        k: int = 8,
        target_psnr: float = 30.0,
        context_steps: int = 2000,
        residual_steps: int = 600,
        lr: float | None = None,
        batch_size: int = 32,
        patches_per_image: int = 100,
        arch: str = "toy",
        random_state: int = 0,
        threads: int = 1,
        model: CodecModel | None = None,
    ):
        self.mode = mode
        self.k = k
        self.target_psnr = target_psnr
        self.context_steps = context_steps
        self.residual_steps = residual_steps
        self.lr = lr
        self.batch_size = batch_size
        self.patches_per_image = patches_per_image
        self.arch = arch
        self.random_state = random_state
        self.threads = threads
        self.model = model

    @classmethod
    def pretrained(cls, **params) -> "TileCodec":
        """Fitted estimator wrapping the shipped toy model."""
        est = cls(model=bitstream.load_toy_model(), context_steps=0, residual_steps=0, **params)
        est.model_ = est.model
        est.n_patches_ = 0
        return est

    def _config(self) -> EncodeConfig:
        if self.mode == "constant":
            return EncodeConfig.constant(int(self.k))
        return EncodeConfig(self.mode, target_psnr=float(self.target_psnr))

    def fit(self, X, y=None):
        self._config()  # validate coding parameters early
        if self.arch not in ("toy", "paper"):
            raise ValueError(f"arch must be 'toy' or 'paper', got {self.arch!r}")
        if self.model is not None:
            model = self.model.copy()
        else:
            model = CodecModel.initialize(PAPER_ARCH if self.arch == "paper" else TOY_ARCH, self.random_state)
        needs_data = self.context_steps > 0 or self.residual_steps > 0
        patches = np.zeros((0, 64, 64, 3), np.uint8)
        if needs_data:
            images = check_images(X)
            records = train.build_corpus([(str(n), img) for n, img in enumerate(images)], self.patches_per_image)
            if not records:
                raise ValueError("no 64x64 patches fit inside the training images")
            patches = train.stack_patches(records)
        common = dict(batch_size=self.batch_size, lr0=self.lr, seed=self.random_state)
        if self.context_steps > 0:
            cfg = train.TrainConfig(steps=self.context_steps, phase="context", **common)
            model = train.train_context(patches, cfg, model=model)
        if self.residual_steps > 0:
            cfg = train.TrainConfig(steps=self.residual_steps, phase="residual", **common)
            model = train.train_residual(patches, model, cfg)
        self.model_ = model
        self.n_patches_ = len(patches)
        return self

    def transform(self, X) -> list[bytes]:
        check_is_fitted(self, "model_")
        cfg = self._config()
        return [encode_image(img, cfg, self.model_, self.threads).data for img in check_images(X)]

    def inverse_transform(self, streams: Sequence[bytes]) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        return [decode_image(bytes(s), self.model_, self.threads) for s in streams]

    def predict(self, X) -> list[np.ndarray]:
        """Reconstructions after an encode/decode round trip."""
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None) -> float:
        """Mean PSNR (dB) of the reconstructions, skipping lossless images."""
        images = check_images(X)
        values = [psnr(a, b) for a, b in zip(images, self.predict(images))]
        finite = [v for v in values if np.isfinite(v)]
        return float(np.mean(finite)) if finite else float("inf")

    def bits_per_pixel(self, X) -> np.ndarray:
        images = check_images(X)
        streams = self.transform(images)
        return np.array([len(s) * 8 / (img.shape[0] * img.shape[1]) for s, img in zip(streams, images)])


__all__ = ["TileCodec", "check_images", "NotFittedError"]
