"""Binary PPM (P6) and non-interlaced 8-bit PNG reading and writing.

Images are ``numpy.uint8`` arrays of shape (height, width, 3).  Deflate
itself comes from :mod:`zlib`; chunking, CRCs, filters and colour
conversion are handled here.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ImageFormatError, UnsupportedImageError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected height x width x 3 image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has a zero dimension: {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


# ---------------------------------------------------------------------------
# PPM


def encode_ppm(img: np.ndarray) -> bytes:
    img = _check_image(img)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise UnsupportedImageError("not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"malformed PPM header fields {fields!r}") from None
    if maxval != 255:
        raise UnsupportedImageError(f"PPM maxval {maxval} unsupported (only 255)")
    if w < 1 or h < 1:
        raise ImageFormatError(f"PPM has zero dimension {w}x{h}")
    need = w * h * 3
    pixels = data[pos : pos + need]
    if len(pixels) != need:
        raise ImageFormatError(f"PPM pixel data truncated: expected {need} bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# PNG


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(payload, zlib.crc32(kind)) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def _paeth_predictor(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    a, b, c = (v.astype(np.int16) for v in (a, b, c))
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c)).astype(np.uint8)


def filter_rows(raw: np.ndarray, bpp: int) -> bytes:
    """PNG-filter every scanline, choosing per row the filter with the smallest
    sum of absolute signed residuals (the usual minimum-sum heuristic)."""
    h, stride = raw.shape
    prev = np.vstack([np.zeros((1, stride), np.uint8), raw[:-1]])
    left = np.zeros_like(raw)
    left[:, bpp:] = raw[:, :-bpp]
    upleft = np.zeros_like(raw)
    upleft[:, bpp:] = prev[:, :-bpp]
    cands = np.stack(
        [
            raw,
            raw - left,
            raw - prev,
            raw - ((left.astype(np.uint16) + prev) // 2).astype(np.uint8),
            raw - _paeth_predictor(left, prev, upleft),
        ]
    )
    cost = np.abs(cands.view(np.int8).astype(np.int32)).sum(axis=2)
    choice = np.argmin(cost, axis=0)
    out = np.empty((h, stride + 1), np.uint8)
    out[:, 0] = choice
    out[:, 1:] = cands[choice, np.arange(h)]
    return out.tobytes()


def encode_png(img: np.ndarray, compression: str = "fixed") -> bytes:
    """RGB8 PNG bytes; ``compression`` is "fixed" (fixed-Huffman deflate) or "stored"."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if compression == "fixed":
        comp = zlib.compressobj(9, zlib.DEFLATED, 15, 9, zlib.Z_FIXED)
        idat = comp.compress(filter_rows(img.reshape(h, w * 3), 3)) + comp.flush()
    elif compression == "stored":
        rows = np.zeros((h, w * 3 + 1), np.uint8)
        rows[:, 1:] = img.reshape(h, w * 3)
        idat = zlib.compress(rows.tobytes(), 0)
    else:
        raise ValueError(f"unknown PNG compression {compression!r}")
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _unfilter(data: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    if len(data) != h * (stride + 1):
        raise ImageFormatError(f"PNG image data has {len(data)} bytes, expected {h * (stride + 1)}")
    rows = np.frombuffer(data, np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), np.uint8)
    prev = np.zeros(stride, np.uint8)
    for y in range(h):
        ftype, line = rows[y, 0], rows[y, 1:]
        if ftype == 0:
            cur = line.copy()
        elif ftype == 1:
            # running sum per byte lane, modulo 256
            pad = (-stride) % bpp
            lanes = np.concatenate([line, np.zeros(pad, np.uint8)]).reshape(-1, bpp)
            cur = (np.cumsum(lanes, axis=0, dtype=np.uint64) % 256).astype(np.uint8).reshape(-1)[:stride]
        elif ftype == 2:
            cur = line + prev
        elif ftype in (3, 4):
            cur = _unfilter_sequential(line, prev, bpp, ftype)
        else:
            raise ImageFormatError(f"invalid PNG filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out


def _unfilter_sequential(line: np.ndarray, prev: np.ndarray, bpp: int, ftype: int) -> np.ndarray:
    cur = bytearray(line.tobytes())
    up = prev.tobytes()
    for i in range(len(cur)):
        a = cur[i - bpp] if i >= bpp else 0
        b = up[i]
        if ftype == 3:
            cur[i] = (cur[i] + ((a + b) >> 1)) & 0xFF
        else:
            c = up[i - bpp] if i >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
            cur[i] = (cur[i] + pred) & 0xFF
    return np.frombuffer(bytes(cur), np.uint8)


def decode_png(data: bytes) -> np.ndarray:
    if data[:8] != PNG_SIGNATURE:
        raise UnsupportedImageError("not a PNG file")
    pos = 8
    header = None
    palette = None
    idat = []
    while True:
        if pos + 8 > len(data):
            raise ImageFormatError("PNG truncated before IEND")
        length, kind = struct.unpack(">I4s", data[pos : pos + 8])
        payload = data[pos + 8 : pos + 8 + length]
        crc_bytes = data[pos + 8 + length : pos + 12 + length]
        if len(payload) != length or len(crc_bytes) != 4:
            raise ImageFormatError(f"PNG chunk {kind!r} truncated")
        if zlib.crc32(payload, zlib.crc32(kind)) & 0xFFFFFFFF != struct.unpack(">I", crc_bytes)[0]:
            raise ImageFormatError(f"PNG chunk {kind!r} fails CRC check")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif kind == b"PLTE":
            palette = np.frombuffer(payload, np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            idat.append(payload)
        elif kind == b"IEND":
            break
        elif not kind[0] & 0x20:
            raise UnsupportedImageError(f"unknown critical PNG chunk {kind!r}")
    if header is None:
        raise ImageFormatError("PNG has no IHDR chunk")
    w, h, depth, ctype, comp, filt, interlace = header
    if depth != 8:
        raise UnsupportedImageError(f"PNG bit depth {depth} unsupported (only 8)")
    if ctype not in _CHANNELS:
        raise ImageFormatError(f"invalid PNG colour type {ctype}")
    if interlace:
        raise UnsupportedImageError("interlaced PNG unsupported")
    if comp or filt:
        raise ImageFormatError("unknown PNG compression or filter method")
    if w < 1 or h < 1:
        raise ImageFormatError(f"PNG has zero dimension {w}x{h}")
    try:
        raw = zlib.decompress(b"".join(idat))  # verifies the adler32 checksum
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG image data: {exc}") from None
    nch = _CHANNELS[ctype]
    px = _unfilter(raw, h, w * nch, nch).reshape(h, w, nch)
    if ctype == 3:
        if palette is None:
            raise ImageFormatError("palette PNG without PLTE chunk")
        if px.max(initial=0) >= len(palette):
            raise ImageFormatError("palette index out of range")
        return palette[px[..., 0]]
    if ctype in (0, 4):
        return np.repeat(px[..., :1], 3, axis=2)
    return np.ascontiguousarray(px[..., :3])


def png_size(img: np.ndarray) -> int:
    """Byte length of the PNG encoding; a deflate-class difficulty measure."""
    return len(encode_png(img))


# ---------------------------------------------------------------------------
# files


def read_image(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] == PNG_SIGNATURE:
        return decode_png(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise UnsupportedImageError(f"{path}: unrecognised image format (need binary PPM or PNG)")


def write_image(img: np.ndarray, path: str | os.PathLike, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "png":
        data = encode_png(img)
    elif fmt in ("ppm", "p6"):
        data = encode_ppm(img)
    else:
        raise ValueError(f"unknown image format {fmt!r} for {path}")
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc
