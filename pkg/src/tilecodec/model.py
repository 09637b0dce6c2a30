"""Architecture descriptions and the container for all learned weights."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ModelError
from .layers import LstmParams
from .tensor import Tensor

TILE = 32
CONTEXT = 2 * TILE
#: Pixel value p maps to (p - 128) / 142 in network space.
PIXEL_SCALE = 142.0
PIXEL_OFFSET = 128.0


@dataclass(frozen=True)
class PredictorArch:
    """Context predictor: four stride-2 convs, channel-wise FC at 4x4, three stride-2 up-convs, 1x1 RGB head."""

    enc_depths: tuple[int, ...] = (64, 128, 256, 512)
    dec_depths: tuple[int, ...] = (256, 128, 64)
    enc_kernel: int = 3
    dec_kernel: int = 4
    leak: float = 0.2


@dataclass(frozen=True)
class ResidualArch:
    """Recurrent residual autoencoder; decoder depths list the 1x1 bit projection first."""

    stem_depth: int = 64
    enc_depths: tuple[int, ...] = (256, 512, 512)
    bit_depth: int = 8
    dec_depths: tuple[int, ...] = (512, 512, 256, 64)
    kernel: int = 3


@dataclass(frozen=True)
class Architecture:
    predictor: PredictorArch = field(default_factory=PredictorArch)
    residual: ResidualArch = field(default_factory=ResidualArch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        p = {k: tuple(v) if isinstance(v, list) else v for k, v in d["predictor"].items()}
        r = {k: tuple(v) if isinstance(v, list) else v for k, v in d["residual"].items()}
        return cls(PredictorArch(**p), ResidualArch(**r))


#: Layer widths as drawn for the full-size networks.
PAPER_ARCH = Architecture()

#: Narrow variant that trains on one CPU core in minutes.  Spatial
#: structure (64 -> 4 -> 32, 4x4x8 bottleneck) is identical to PAPER_ARCH.
TOY_ARCH = Architecture(
    PredictorArch(enc_depths=(16, 32, 48, 64), dec_depths=(48, 32, 16)),
    ResidualArch(stem_depth=8, enc_depths=(16, 32, 32), bit_depth=8, dec_depths=(32, 32, 16, 8)),
)


def parameter_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in a fixed canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    p = arch.predictor
    depth = 3
    for n, d in enumerate(p.enc_depths, 1):
        shapes[f"ctx.conv{n}.w"] = (p.enc_kernel, p.enc_kernel, depth, d)
        shapes[f"ctx.conv{n}.b"] = (d,)
        depth = d
    side = CONTEXT >> len(p.enc_depths)
    shapes["ctx.cfc.depthwise"] = (side, side, depth, side * side)
    shapes["ctx.cfc.pointwise"] = (1, 1, depth, depth)
    for n, d in enumerate(p.dec_depths, 1):
        shapes[f"ctx.up{n}.w"] = (p.dec_kernel, p.dec_kernel, depth, d)
        shapes[f"ctx.up{n}.b"] = (d,)
        depth = d
    shapes["ctx.out.w"] = (1, 1, depth, 3)
    shapes["ctx.out.b"] = (3,)

    r = arch.residual
    k = r.kernel
    shapes["res.stem.w"] = (k, k, 3, r.stem_depth)
    shapes["res.stem.b"] = (r.stem_depth,)
    depth = r.stem_depth
    for n, d in enumerate(r.enc_depths, 1):
        shapes[f"res.enc{n}.wx"] = (k, k, depth, 4 * d)
        shapes[f"res.enc{n}.wh"] = (1, 1, d, 4 * d)
        shapes[f"res.enc{n}.b"] = (4 * d,)
        depth = d
    shapes["res.bits.w"] = (1, 1, depth, r.bit_depth)
    shapes["res.bits.b"] = (r.bit_depth,)
    first, *lstm = r.dec_depths
    shapes["res.dec0.w"] = (1, 1, r.bit_depth, first)
    shapes["res.dec0.b"] = (first,)
    depth = first
    for n, d in enumerate(lstm, 1):
        shapes[f"res.dec{n}.wx"] = (k, k, depth, 4 * d)
        shapes[f"res.dec{n}.wh"] = (1, 1, d, 4 * d)
        shapes[f"res.dec{n}.b"] = (4 * d,)
        depth = d
    shapes["res.out.w"] = (1, 1, depth, 3)
    shapes["res.out.b"] = (3,)
    return shapes


def count_parameters(arch: Architecture, prefix: str = "") -> int:
    return sum(int(np.prod(s)) for name, s in parameter_shapes(arch).items() if name.startswith(prefix))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(np.float32)


class CodecModel:
    """All learned weights of both networks plus their architecture.

    Parameters are float32 :class:`Tensor` leaves keyed by name.  ``meta``
    holds free-form training metadata (steps, final losses).
    """

    def __init__(self, arch: Architecture, params: dict[str, np.ndarray], meta: dict | None = None):
        expected = parameter_shapes(arch)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ModelError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ModelError(f"{name}: shape {tuple(params[name].shape)} != descriptor {shape}")
        self.arch = arch
        self.params = {n: Tensor(np.asarray(a, dtype=np.float32)) for n, a in params.items()}
        self.meta = dict(meta or {})

    @classmethod
    def initialize(cls, arch: Architecture = TOY_ARCH, seed: int = 0, init: str = "fan_in") -> "CodecModel":
        """Fresh weights: 2-sigma truncated normals, zero biases, forget-gate bias 1.

        ``init="fan_in"`` draws each weight with sigma = 1 / sqrt(fan_in);
        ``init="fixed"`` uses sigma = 0.02 throughout, which is only
        variance-preserving at the full published widths.
        """
        if init not in ("fan_in", "fixed"):
            raise ValueError(f"init must be 'fan_in' or 'fixed', got {init!r}")
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(arch).items():
            if name.endswith(".b"):
                b = np.zeros(shape, dtype=np.float32)
                if name.startswith(("res.enc", "res.dec")) and name != "res.dec0.b":
                    d = shape[0] // 4
                    b[d : 2 * d] = 1.0  # forget gate
                params[name] = b
            else:
                std = 1 / np.sqrt(np.prod(shape[:-1])) if init == "fan_in" else 0.02
                params[name] = truncated_normal(rng, shape, std)
        return cls(arch, params, {"seed": seed, "init": init, "steps": {}})

    @classmethod
    def zeros(cls, arch: Architecture = TOY_ARCH) -> "CodecModel":
        return cls(arch, {n: np.zeros(s, dtype=np.float32) for n, s in parameter_shapes(arch).items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def lstm(self, prefix: str) -> LstmParams:
        return LstmParams(self.params[f"{prefix}.wx"], self.params[f"{prefix}.wh"], self.params[f"{prefix}.b"])

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.params.items() if n.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def copy(self) -> "CodecModel":
        return CodecModel(self.arch, {n: a.copy() for n, a in self.arrays().items()}, json.loads(json.dumps(self.meta)))

    def descriptor(self) -> dict:
        return {
            "architecture": self.arch.to_dict(),
            "parameters": [[n, list(t.shape)] for n, t in self.params.items()],
        }

    @property
    def digest(self) -> bytes:
        """8-byte identity over architecture descriptor and weights (metadata excluded)."""
        h = hashlib.sha256(json.dumps(self.descriptor(), sort_keys=True).encode())
        for t in self.params.values():
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.digest()[:8]

    def num_parameters(self, prefix: str = "") -> int:
        return sum(t.data.size for _, t in self.named(prefix))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodecModel):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.meta == other.meta
            and list(self.params) == list(other.params)
            and all(self.params[n].data.tobytes() == other.params[n].data.tobytes() for n in self.params)
        )

    def __repr__(self) -> str:
        return f"CodecModel(params={self.num_parameters()}, digest={self.digest.hex()})"
