"""Shared test data builders."""
import numpy as np

from tilecodec.model import Architecture, PredictorArch, ResidualArch

#: Smallest widths that keep every layer of both networks in place.
TINY_ARCH = Architecture(
    PredictorArch(enc_depths=(2, 3, 3, 4), dec_depths=(3, 2, 2)),
    ResidualArch(stem_depth=2, enc_depths=(2, 3, 3), bit_depth=8, dec_depths=(3, 3, 2, 2)),
)


def random_image(rng, h, w):
    """Smooth-ish RGB test image so the codec sees realistic statistics."""
    y, x = np.mgrid[0:h, 0:w]
    base = 128 + 60 * np.sin(x / (3 + rng.random() * 9) + rng.random() * 6) * np.cos(y / (4 + rng.random() * 9))
    img = base[..., None] + rng.normal(0, 12, (h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)
