"""Procedural toy corpus with natural-image-like statistics.

Each image is a "dead leaves" composition: occluding shapes whose sizes
follow a power law, which yields edges and a roughly 1/f amplitude
spectrum as in photographs.  A mild optical blur, smooth shading and 1/f
texture of varying strength give regions of very different coding
difficulty, which spatially adaptive allocation exploits.  The defaults
were calibrated so that the DCT energy compaction of 32x32 tiles is close
to that of natural photographs.  Natural-photo corpora are too large to
ship.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .image_io import read_image, write_image

TRAIN_IMAGES = 20
TRAIN_SIZE = (384, 384)
HELDOUT_IMAGES = 4
EVAL_IMAGES = 4
EVAL_SIZE = (96, 128)


def _smooth_field(rng: np.random.Generator, h: int, w: int, terms: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    f = np.zeros((h, w))
    for _ in range(terms):
        fy, fx = rng.uniform(-3, 3, size=2)
        f += rng.uniform(0.2, 1) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return f / terms


def pink_noise(rng: np.random.Generator, h: int, w: int, exponent: float = 1.0) -> np.ndarray:
    """Unit-variance noise with amplitude spectrum 1 / f**exponent."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fy**2 + fx**2)
    f[0, 0] = 1.0
    spec = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f**exponent
    spec[0, 0] = 0
    out = np.fft.irfft2(spec, s=(h, w))
    return out / (out.std() + 1e-12)


def _leaf_mask(rng, yy, xx, r):
    """Boolean mask of a random disc, rectangle or ellipse of radius ``r`` centred at 0."""
    kind = rng.integers(0, 3)
    if kind == 0:
        return yy**2 + xx**2 < r * r
    ang = rng.uniform(0, np.pi)
    u = yy * np.cos(ang) + xx * np.sin(ang)
    v = -yy * np.sin(ang) + xx * np.cos(ang)
    aspect = rng.uniform(0.3, 1.0)
    if kind == 1:
        return (np.abs(u) < r) & (np.abs(v) < r * aspect)
    return (u / r) ** 2 + (v / (r * aspect)) ** 2 < 1


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an H x W x C float image with edge replication."""
    if sigma <= 0:
        return img
    radius = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    out = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = sum(w * out[i : i + img.shape[0]] for i, w in enumerate(k))
    out = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    return sum(w * out[:, i : i + img.shape[1]] for i, w in enumerate(k))


def synthetic_image(
    rng: np.random.Generator,
    height: int,
    width: int,
    coverage: float = 1.0,
    r_min: float = 12.0,
    r_max_frac: float = 0.5,
    blur: float = 1.0,
    texture: tuple[float, float] = (3.0, 8.0),
    rough: tuple[float, float] = (6.0, 12.0),
    noise: float = 2.0,
) -> np.ndarray:
    """One RGB uint8 image; ``coverage`` is the mean number of leaves over a pixel.

    Leaf radii follow p(r) ~ r^-3 on [r_min, r_max_frac * min side].  Base
    texture amplitude is drawn from ``texture`` and a few rough regions
    from ``rough``; ``blur`` is the optical point-spread sigma in pixels.
    """
    base = rng.uniform(40, 215, size=3)
    img = np.empty((height, width, 3))
    for c in range(3):
        img[..., c] = base[c] + 50 * _smooth_field(rng, height, width)
    palette = rng.uniform(20, 235, size=(int(rng.integers(3, 7)), 3))
    r_max = max(r_max_frac * min(height, width), r_min + 1)
    mean_area = 2 * np.pi * r_min**2 * np.log(r_max / r_min) * 0.8
    n_leaves = int(coverage * height * width / mean_area) + 1
    u = rng.random(n_leaves)
    radii = (r_min**-2 - u * (r_min**-2 - r_max**-2)) ** -0.5
    for r in radii:
        cy, cx = rng.uniform(-r, height + r), rng.uniform(-r, width + r)
        y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, height)
        x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, width)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        yy -= cy
        xx -= cx
        mask = _leaf_mask(rng, yy, xx, r)
        color = palette[rng.integers(len(palette))] + rng.normal(0, 18, size=3)
        grad = rng.normal(0, 20, size=2) / max(r, 8)
        shade = grad[0] * yy + grad[1] * xx
        region = img[y0:y1, x0:x1]
        region[mask] = color + shade[mask][:, None]
    img = gaussian_blur(img, blur)
    # 1/f texture everywhere, stronger inside a few random regions
    strength = np.full((height, width), rng.uniform(*texture))
    for _ in range(int(rng.integers(1, 4))):
        h0, w0 = int(rng.integers(24, max(25, height // 2))), int(rng.integers(24, max(25, width // 2)))
        y0, x0 = int(rng.integers(0, height - h0 + 1)), int(rng.integers(0, width - w0 + 1))
        strength[y0 : y0 + h0, x0 : x0 + w0] = rng.uniform(*rough)
    tex = pink_noise(rng, height, width, rng.uniform(1.0, 1.5))
    img += (strength * tex)[..., None] * rng.uniform(0.6, 1.0, size=3)
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate(seed: int = 2017) -> dict[str, list[np.ndarray]]:
    """The train / heldout / eval splits, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    return {
        "train": [synthetic_image(rng, *TRAIN_SIZE) for _ in range(TRAIN_IMAGES)],
        "heldout": [synthetic_image(rng, *TRAIN_SIZE) for _ in range(HELDOUT_IMAGES)],
        "eval": [synthetic_image(rng, *EVAL_SIZE) for _ in range(EVAL_IMAGES)],
    }


def write_corpus(root: str | os.PathLike, seed: int = 2017) -> None:
    root = Path(root)
    for split, images in generate(seed).items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for n, img in enumerate(images):
            write_image(img, root / split / f"{split}{n:02d}.png")


def image_paths(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".ppm"))


def load_images(directory: str | os.PathLike) -> list[tuple[str, np.ndarray]]:
    """(stem, image) pairs sorted by file name."""
    return [(p.stem, read_image(p)) for p in image_paths(directory)]


def default_corpus_dir() -> Path:
    return Path(__file__).parent / "data" / "corpus"


if __name__ == "__main__":
    write_corpus(default_corpus_dir())
