"""Binary tensor records and named-tensor checkpoints.

Tensor record: b"CFRT", version u8 (=1), rank u8, rank x u32 extents, float32 payload.
Checkpoint: u32 count, then count x (u16 name length, UTF-8 name, tensor record).
All integers and floats little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"CFRT"
VERSION = 1


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if not 1 <= arr.ndim <= 255:
        raise FormatError(f"cannot store array of rank {arr.ndim}")
    arr = np.ascontiguousarray(arr)
    f.write(MAGIC)
    f.write(struct.pack("<BB", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(f, 2))
    if version != VERSION:
        raise FormatError(f"unsupported tensor record version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(shape))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_tensor(path, array) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in insertion order."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, arr)
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after last checkpoint record")
    return out
