"""HGW1 checkpoint container: named float64 tensors with explicit dims."""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"HGW1"
_VERSION = 1


def save_weights(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            # note: ascontiguousarray would promote 0-d gains to shape (1,)
            a = np.asarray(tensors[name], dtype=np.float64, order="C")
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    def read(f, n):
        data = f.read(n)
        if len(data) != n:
            raise ValueError("truncated HGW file")
        return data

    with open(path, "rb") as f:
        if read(f, 4) != _MAGIC:
            raise ValueError("not a HGW checkpoint")
        (version,) = struct.unpack("<I", read(f, 4))
        if version != _VERSION:
            raise ValueError(f"unsupported HGW version {version}")
        (count,) = struct.unpack("<Q", read(f, 8))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", read(f, 4))
            name = read(f, nlen).decode()
            (ndim,) = struct.unpack("<I", read(f, 4))
            shape = tuple(struct.unpack("<Q", read(f, 8))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            payload = read(f, n * 8)
            out[name] = np.frombuffer(payload, dtype=np.float64).reshape(shape).copy()
        return out
