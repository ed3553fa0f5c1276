"""Binary checkpoint format for named parameter tensors.

Layout: magic, format version, entry count, then per entry a name and
shape, then every array's raw little-endian float64 data in header order.
Round-trips are bit-exact. Files are written via a temporary path and an
atomic rename so a crash never leaves a corrupt checkpoint.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"SPCK"
VERSION = 1


def save_checkpoint(params: dict[str, Tensor | np.ndarray], path: str) -> None:
    names = list(params.keys())
    arrays = []
    for name in names:
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arrays.append(np.asarray(arr, dtype=np.float64, order="C"))

    header = bytearray()
    header += MAGIC
    header += struct.pack("<II", VERSION, len(names))
    for name, arr in zip(names, arrays):
        encoded = name.encode("utf-8")
        header += struct.pack("<H", len(encoded))
        header += encoded
        header += struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(header))
        for arr in arrays:
            fh.write(arr.astype("<f8", copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    return out
