"""Flat binary tensor files and atomic writes.

Layout: magic "TSR1", then little-endian u32 version, u32 ndim, ndim u32
dims, then float32 little-endian values in row-major order.  All writers
in the package go through the atomic helpers (write to a temp file in the
same directory, then rename) so readers never observe partial files.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import TensorFormatError

TENSOR_MAGIC = b"TSR1"
TENSOR_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tensor(path, array) -> None:
    """Write an array as a TSR1 file (values stored as float32)."""
    a = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    atomic_write_bytes(path, header + a.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a TSR1 file; returns a float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: not a TSR1 tensor file")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"{path}: unsupported tensor version {version}")
    offset = 12
    if len(blob) < offset + 4 * ndim:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) != offset + 4 * count:
        raise TensorFormatError(
            f"{path}: payload has {len(blob) - offset} bytes, expected {4 * count}"
        )
    return np.frombuffer(blob[offset:], dtype="<f4").reshape(dims).copy()
