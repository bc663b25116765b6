"""Binary tensor files, checkpoints and netpbm images.

``.s3dt`` layout: ``b"S3DT"``, one dtype byte (0 float32, 1 float64), one
rank byte, ``rank`` little-endian u32 extents, then the row-major
little-endian payload.

Checkpoints: little-endian u32 record count, then per record a u32 name
length, the UTF-8 name and an embedded ``.s3dt`` blob.
"""
from __future__ import annotations

import io as _io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"S3DT"
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        a = a.astype(np.float64)
    if a.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    head = MAGIC + bytes([_CODES[a.dtype], a.ndim]) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype(_DTYPES[_CODES[a.dtype]], copy=False).tobytes(order="C")


def _read_exact(stream: BinaryIO, n: int, path) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(path, f"truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_stream(stream: BinaryIO, path="<stream>") -> np.ndarray:
    if _read_exact(stream, 4, path) != MAGIC:
        raise FormatError(path, "bad magic (expected S3DT)")
    code, rank = _read_exact(stream, 2, path)
    if code not in _DTYPES:
        raise FormatError(path, f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, path))
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(stream, count * dtype.itemsize, path)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def decode_tensor(blob: bytes, path="<bytes>") -> np.ndarray:
    stream = _io.BytesIO(blob)
    out = read_tensor_stream(stream, path)
    if stream.read(1):
        raise FormatError(path, "trailing bytes after tensor payload")
    return out


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), path)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, encode_tensor(value)]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    stream = _io.BytesIO(path.read_bytes())
    (count,) = struct.unpack("<I", _read_exact(stream, 4, path))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(stream, 4, path))
        try:
            name = _read_exact(stream, n, path).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(path, f"record name is not UTF-8: {exc}") from None
        out[name] = read_tensor_stream(stream, path)
    if stream.read(1):
        raise FormatError(path, "trailing bytes after last record")
    return out


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """``image`` is [3,H,W] floats in [0,1] or uint8."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3,H,W], got {img.shape}")
    data = img if img.dtype == np.uint8 else to_bytes(img)
    h, w = data.shape[1:]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.transpose(1, 2, 0).tobytes())


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    data = img if img.dtype == np.uint8 else to_bytes(img)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def write_pbm(path, mask) -> None:
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    # P4: 1 = black; bits packed MSB first, rows padded to whole bytes
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode("ascii") + np.packbits(m, axis=1).tobytes())


def _parse_header(blob: bytes, n_fields: int, path):
    fields, pos = [], 0
    while len(fields) < n_fields:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated netpbm header")
        fields.append(blob[start:pos])
    return fields, pos + 1


def read_ppm(path) -> np.ndarray:
    """Returns uint8 [3,H,W]."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _parse_header(blob, 4, path)
    if magic != b"P6" or int(maxval) != 255:
        raise FormatError(path, "expected binary P6 with maxval 255")
    w, h = int(w), int(h)
    data = blob[pos:pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise FormatError(path, "truncated P6 payload")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _parse_header(blob, 4, path)
    if magic != b"P5" or int(maxval) != 255:
        raise FormatError(path, "expected binary P5 with maxval 255")
    w, h = int(w), int(h)
    data = blob[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(path, "truncated P5 payload")
    return np.frombuffer(data, np.uint8).reshape(h, w).copy()


def read_pbm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (magic, w, h), pos = _parse_header(blob, 3, path)
    if magic != b"P4":
        raise FormatError(path, "expected binary P4")
    w, h = int(w), int(h)
    row = (w + 7) // 8
    data = blob[pos:pos + row * h]
    if len(data) != row * h:
        raise FormatError(path, "truncated P4 payload")
    bits = np.unpackbits(np.frombuffer(data, np.uint8).reshape(h, row), axis=1)[:, :w]
    return bits.astype(bool)
