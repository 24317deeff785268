"""PMAP: a bit-exact little-endian float-plane container.

Layout: ``b"PMAP"``, version byte ``0x01``, u32 height, u32 width, then
``height * width`` little-endian float32 samples in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import PmapFormatError

MAGIC = b"PMAP"
VERSION = 1
_HEADER = struct.Struct("<4sBII")


def encode_pmap(plane: np.ndarray) -> bytes:
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError(f"PMAP holds a single HxW plane, got shape {plane.shape}")
    if not np.all(np.isfinite(plane)):
        raise ValueError("PMAP planes must be finite")
    h, w = plane.shape
    body = np.ascontiguousarray(plane, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, h, w) + body


def decode_pmap(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise PmapFormatError(f"truncated header ({len(data)} bytes)")
    magic, version, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PmapFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise PmapFormatError(f"unsupported version {version}")
    expected = _HEADER.size + 4 * h * w
    if len(data) != expected:
        raise PmapFormatError(f"expected {expected} bytes for {h}x{w}, got {len(data)}")
    plane = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)
    return plane.astype(np.float32)


def write_pmap(plane: np.ndarray, path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode_pmap(plane))


def read_pmap(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pmap(data)
    except PmapFormatError as exc:
        raise PmapFormatError(f"{path}: {exc}") from exc
