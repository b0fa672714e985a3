"""Binary file formats: raw float images, PGM, filter banks, and mosaics."""

from __future__ import annotations

import os
import struct

import numpy as np

from .convops import FilterBank, as_image
from .errors import FormatError

RAW_MAGIC = b"CAOLIMG0"
BANK_MAGIC = b"CAOLFB00"


def write_raw(path, x) -> None:
    """Write an image as magic, uint32 height, uint32 width, float64 data."""
    x = as_image(x)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:8] != RAW_MAGIC:
        raise FormatError(f"{path}: not a raw image (bad magic)")
    h, w = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 8 * h * w:
        raise FormatError(f"{path}: expected {h}x{w} float64 payload")
    return np.frombuffer(data, dtype="<f8", offset=16).reshape(h, w).astype(float)


def _pgm_tokens(data: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM, returning values scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: only binary P5 PGM is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    raster = data[offset:offset + need]
    if len(raster) != need:
        raise FormatError(f"{path}: truncated PGM raster")
    img = np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(float)
    return img / maxval


def write_pgm(path, x, bits: int = 8, scale: bool = False) -> None:
    """Write an image as binary PGM.

    Values are clipped to [0, 1] unless `scale` is set, in which case the
    image is first mapped affinely onto [0, 1].
    """
    x = as_image(x)
    if bits not in (8, 16):
        raise FormatError("PGM bit depth must be 8 or 16")
    if scale:
        lo, hi = float(x.min()), float(x.max())
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(x, 0.0, 1.0) * maxval)
    dtype = "u1" if bits == 8 else ">u2"
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (x.shape[1], x.shape[0], maxval))
        fh.write(q.astype(dtype).tobytes())


def read_image(path) -> np.ndarray:
    """Read a raw or PGM image, chosen by content."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == RAW_MAGIC:
        return read_raw(path)
    if head[:2] == b"P5":
        return read_pgm(path)
    raise FormatError(f"{path}: unrecognized image format")


IMAGE_SUFFIXES = (".pgm", ".raw", ".img")


def read_image_dir(directory) -> list[np.ndarray]:
    """All images in a directory, in sorted file-name order."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"{directory}: not a directory")
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise FormatError(f"{directory}: no .pgm/.raw images found")
    return [read_image(os.path.join(directory, n)) for n in names]


def bank_to_bytes(bank: FilterBank) -> bytes:
    rh, rw = bank.shape
    head = BANK_MAGIC + struct.pack("<III", rh, rw, bank.K)
    return head + np.asarray(bank.D, dtype="<f8").tobytes(order="F")


def bank_from_bytes(data: bytes, offset: int = 0) -> tuple[FilterBank, int]:
    """Parse one filter-bank record; returns the bank and the end offset."""
    if data[offset:offset + 8] != BANK_MAGIC:
        raise FormatError("not a filter bank record (bad magic)")
    rh, rw, K = struct.unpack("<III", data[offset + 8:offset + 20])
    R = rh * rw
    start, end = offset + 20, offset + 20 + 8 * R * K
    if len(data) < end or R == 0:
        raise FormatError("truncated filter bank record")
    D = np.frombuffer(data[start:end], dtype="<f8").reshape((R, K), order="F")
    return FilterBank(D.astype(float), (rh, rw)), end


def write_bank(path, bank: FilterBank) -> None:
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def read_bank(path) -> FilterBank:
    with open(path, "rb") as fh:
        data = fh.read()
    bank, end = bank_from_bytes(data)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes after filter bank")
    return bank


def filter_mosaic(bank: FilterBank, gap: int = 1) -> np.ndarray:
    """Tile the filters on a near-square grid, each scaled to [0, 1]."""
    rh, rw = bank.shape
    cols = int(np.ceil(np.sqrt(bank.K)))
    rows = int(np.ceil(bank.K / cols))
    out = np.ones((rows * (rh + gap) + gap, cols * (rw + gap) + gap))
    for k, f in enumerate(bank.filters):
        lo, hi = f.min(), f.max()
        tile = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
        r, c = divmod(k, cols)
        out[gap + r * (rh + gap):gap + r * (rh + gap) + rh,
            gap + c * (rw + gap):gap + c * (rw + gap) + rw] = tile
    return out
