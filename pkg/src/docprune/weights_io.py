"""Flat binary weight files shared by the detector and the instruction filter.

Layout, all little-endian:

    magic   4 bytes  b"HRVD"
    version u32      currently 1
    kind    u32      model kind tag (see KIND_*)
    count   u32      number of named arrays
    arrays  repeated: name_len u16, name utf-8, ndim u8, dims u32 each,
                      float64 data in C order

Array order is preserved on round-trip; readers should index by name.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HRVD"
VERSION = 1

KIND_DETECTOR = 1
KIND_IFM = 2


def write_weights(path, kind: int, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, kind))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def read_weights(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"bad magic in weight file {path}: {raw[:4]!r}")
    version, kind = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    (count,) = struct.unpack_from("<I", raw, 12)
    offset = 16
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        arrays[name] = arr.copy()
    return kind, arrays
