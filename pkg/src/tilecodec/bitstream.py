"""Byte formats: the encoded-image stream and the model checkpoint.

Stream layout (all integers little-endian)::

    offset  size  field
    0       4     magic "TNC1"
    4       1     version (1)
    5       2     width  (before padding)
    7       2     height (before padding)
    9       1     tile size (32)
    10      1     mode (0 constant, 1 adaptive)
    11      2     mode parameter (k, or target dB * 256)
    13      8     model digest
    21      n     plan: one u8 iteration count per tile, row-major
    21+n    ...   codes, MSB-first, +1 -> 1; tiles in raster order, iterations
                  in order, each iteration's 128 bits row-major with depth fastest;
                  final byte zero-padded

Checkpoint layout::

    "TNCM" | u8 version | u32 json length | json descriptor+metadata |
    float32 LE weights in descriptor order | sha256 of everything before it
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DigestError,
    ModelError,
    PlanMismatchError,
    TrailingDataError,
    TruncatedStreamError,
    UnsupportedVersionError,
)
from .layers import BITS_PER_ITERATION
from .model import TILE, Architecture, CodecModel

MAGIC = b"TNC1"
VERSION = 1
HEADER = struct.Struct("<4sBHHBBH8s")
HEADER_SIZE = HEADER.size  # 21
MODE_CONSTANT, MODE_ADAPTIVE = 0, 1
MAX_ITERATIONS = 16

MODEL_MAGIC = b"TNCM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    mode: int
    mode_param: int
    model_digest: bytes
    tile_size: int = TILE
    version: int = VERSION

    def __post_init__(self):
        if not (1 <= self.width <= 0xFFFF and 1 <= self.height <= 0xFFFF):
            raise ValueError(f"image dimensions {self.width}x{self.height} outside 1..65535")
        if self.mode not in (MODE_CONSTANT, MODE_ADAPTIVE):
            raise ValueError(f"unknown mode {self.mode}")
        if not 0 <= self.mode_param <= 0xFFFF:
            raise ValueError(f"mode parameter {self.mode_param} does not fit u16")
        if len(self.model_digest) != 8:
            raise ValueError("model digest must be 8 bytes")

    @property
    def grid(self) -> tuple[int, int]:
        return -(-self.height // self.tile_size), -(-self.width // self.tile_size)

    @property
    def n_tiles(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def target_psnr(self) -> float:
        return self.mode_param / 256.0

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC, self.version, self.width, self.height, self.tile_size, self.mode, self.mode_param, self.model_digest
        )


def encode_target(target_psnr: float) -> int:
    """Target dB as u16 8.8 fixed point."""
    return int(round(target_psnr * 256))


def stream_size(n_tiles: int, total_iterations: int) -> int:
    return HEADER_SIZE + n_tiles + -(-total_iterations * BITS_PER_ITERATION // 8)


def write_stream(header: StreamHeader, plan: Sequence[int], codes: Sequence[Sequence[np.ndarray]]) -> bytes:
    """Serialize; ``codes[t]`` holds ``plan[t]`` arrays of 128 values in {-1, +1}."""
    plan = [int(k) for k in np.asarray(plan).reshape(-1)]
    if len(plan) != header.n_tiles:
        raise PlanMismatchError(f"plan has {len(plan)} entries, tile grid {header.grid} needs {header.n_tiles}")
    if len(codes) != len(plan):
        raise PlanMismatchError(f"{len(codes)} tile code lists for {len(plan)} tiles")
    chunks = []
    for t, (k, tile_codes) in enumerate(zip(plan, codes)):
        if not 0 <= k <= MAX_ITERATIONS:
            raise PlanMismatchError(f"tile {t}: iteration count {k} outside 0..{MAX_ITERATIONS}")
        if len(tile_codes) != k:
            raise PlanMismatchError(f"tile {t}: plan says {k} iterations, got {len(tile_codes)} codes")
        for c in tile_codes:
            c = np.asarray(c).reshape(-1)
            if c.size != BITS_PER_ITERATION:
                raise PlanMismatchError(f"tile {t}: code of {c.size} bits, expected {BITS_PER_ITERATION}")
            chunks.append(c > 0)
    bits = np.concatenate(chunks) if chunks else np.zeros(0, bool)
    payload = np.packbits(bits, bitorder="big").tobytes()
    return header.pack() + bytes(plan) + payload


def read_header(data: bytes) -> StreamHeader:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < 5:
        raise TruncatedStreamError(HEADER_SIZE, len(data), "header")
    if data[4] != VERSION:
        raise UnsupportedVersionError(f"stream version {data[4]} unsupported (expected {VERSION})")
    if len(data) < HEADER_SIZE:
        raise TruncatedStreamError(HEADER_SIZE, len(data), "header")
    _, version, width, height, tile, mode, param, digest = HEADER.unpack_from(data)
    if tile != TILE:
        raise UnsupportedVersionError(f"tile size {tile} unsupported (expected {TILE})")
    try:
        return StreamHeader(width, height, mode, param, digest, tile, version)
    except ValueError as exc:
        raise PlanMismatchError(f"invalid header: {exc}") from None


def read_stream(data: bytes) -> tuple[StreamHeader, np.ndarray, list[list[np.ndarray]]]:
    """Inverse of :func:`write_stream`: (header, plan grid, per-tile code lists)."""
    header = read_header(data)
    n = header.n_tiles
    plan_end = HEADER_SIZE + n
    if len(data) < plan_end:
        raise TruncatedStreamError(plan_end, len(data), "plan table")
    plan = np.frombuffer(data[HEADER_SIZE:plan_end], np.uint8).copy()
    if plan.max(initial=0) > MAX_ITERATIONS:
        raise PlanMismatchError(f"plan entry {int(plan.max())} exceeds {MAX_ITERATIONS}")
    total = int(plan.sum())
    expected = stream_size(n, total)
    if len(data) < expected:
        raise TruncatedStreamError(expected, len(data), "payload")
    if len(data) > expected:
        raise TrailingDataError(f"{len(data) - expected} bytes after the payload")
    bits = np.unpackbits(np.frombuffer(data[plan_end:], np.uint8), bitorder="big")
    if bits[total * BITS_PER_ITERATION :].any():
        raise PlanMismatchError("non-zero padding bits after the last code")
    values = np.where(bits[: total * BITS_PER_ITERATION], 1, -1).astype(np.int8)
    codes, pos = [], 0
    for k in plan:
        tile = []
        for _ in range(k):
            tile.append(values[pos : pos + BITS_PER_ITERATION])
            pos += BITS_PER_ITERATION
        codes.append(tile)
    return header, plan.reshape(header.grid), codes


# ---------------------------------------------------------------------------
# model checkpoints


def save_model(model: CodecModel) -> bytes:
    doc = {"descriptor": model.descriptor(), "meta": model.meta}
    blob = json.dumps(doc, sort_keys=True).encode()
    body = [MODEL_MAGIC, struct.pack("<BI", MODEL_VERSION, len(blob)), blob]
    body += [np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in model.params.values()]
    raw = b"".join(body)
    return raw + hashlib.sha256(raw).digest()


def load_model(data: bytes) -> CodecModel:
    if data[:4] != MODEL_MAGIC:
        raise ModelError("not a model checkpoint (bad magic)")
    if len(data) < 9 + 32:
        raise ModelError("model checkpoint truncated")
    raw, tail = data[:-32], data[-32:]
    if hashlib.sha256(raw).digest() != tail:
        raise DigestError("model checkpoint digest mismatch (file corrupt or tampered)")
    version, n = struct.unpack_from("<BI", raw, 4)
    if version != MODEL_VERSION:
        raise ModelError(f"model format version {version} unsupported")
    try:
        doc = json.loads(raw[9 : 9 + n])
        arch = Architecture.from_dict(doc["descriptor"]["architecture"])
        layout = [(name, tuple(shape)) for name, shape in doc["descriptor"]["parameters"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelError(f"malformed model descriptor: {exc}") from None
    pos = 9 + n
    params = {}
    for name, shape in layout:
        size = int(np.prod(shape)) * 4
        chunk = raw[pos : pos + size]
        if len(chunk) != size:
            raise ModelError(f"weights truncated at {name}")
        params[name] = np.frombuffer(chunk, "<f4").reshape(shape).astype(np.float32)
        pos += size
    if pos != len(raw):
        raise ModelError(f"{len(raw) - pos} unexpected bytes after the weights")
    # CodecModel checks the stored layout against the architecture
    return CodecModel(arch, params, doc.get("meta", {}))


def save_model_file(model: CodecModel, path) -> None:
    with open(path, "wb") as f:
        f.write(save_model(model))


def load_model_file(path) -> CodecModel:
    with open(path, "rb") as f:
        return load_model(f.read())


def toy_model_path():
    """Location of the small pretrained checkpoint shipped with the package."""
    from importlib.resources import files

    return files("tilecodec") / "data" / "toy_model.tnm"


def load_toy_model() -> CodecModel:
    return load_model(toy_model_path().read_bytes())
