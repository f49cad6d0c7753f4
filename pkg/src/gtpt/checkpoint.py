"""Binary checkpoint format: bit-exact round-trips of a parameter store.

Layout (little-endian): magic "GTPT", version u32, entry count u32, then per
entry: name length u16, UTF-8 name, dtype code u8 (0 = float32), rank u8,
dims u32[rank], raw values.
"""
from __future__ import annotations

import struct

import numpy as np

from .autodiff import ParamStore

CKPT_MAGIC = b"GTPT"
CKPT_VERSION = 1
DTYPE_F32 = 0


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, store: ParamStore) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(store)))
        for name, tensor in store.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        dtype_code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype_code != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        out[name] = arr
    return out
