"""The .lvol volume container.

Layout: 8-byte magic ``LVOL\\x00\\x01\\x00\\x00``, a little-endian uint32
length prefix, a UTF-8 JSON header ``{"shape": [...], "spacing": [sz, sy, sx],
"dtype": "f32"|"u8"}``, then the raw array values in C order (little-endian
IEEE-754 float32, or uint8 for masks).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LVOL\x00\x01\x00\x00"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}


class VolumeFormatError(IOError):
    """Corrupt or unsupported .lvol content."""


def write_volume(path, array: np.ndarray, spacing) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _NAMES:
        raise VolumeFormatError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    name = _NAMES[arr.dtype]
    header = {"shape": [int(s) for s in arr.shape],
              "spacing": [float(s) for s in spacing],
              "dtype": name}
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.astype(_DTYPES[name], copy=False).tobytes(order="C"))


def read_volume(path) -> tuple[np.ndarray, tuple[float, ...]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise VolumeFormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise VolumeFormatError(f"{path}: unreadable header ({e})") from e
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = _DTYPES.get(header.get("dtype"))
        if dtype is None:
            raise VolumeFormatError(f"{path}: unknown dtype {header.get('dtype')!r}")
        count = int(np.prod(shape, dtype=np.int64))
        raw = f.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise VolumeFormatError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.copy(), spacing
