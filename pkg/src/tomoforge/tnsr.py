"""Reader/writer for the TNSR tensor container.

Layout (all integers little-endian)::

    b"TNSR" | version u8 | count u32 |
    count x ( name_len u32 | name utf-8 | dtype u8 {0: f32, 1: f64} |
              rank u32 | dims u64 * rank | raw little-endian data )
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TnsrFormatError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _CODES:
        # integers (e.g. readings) are stored exactly as f64
        if arr.dtype.kind in "iub" and (arr.size == 0 or np.abs(arr).max() < 2**53):
            arr = arr.astype(np.float64)
        else:
            raise TnsrFormatError(f"unsupported dtype {arr.dtype}")
    return arr


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = _as_array(value)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise TnsrFormatError("bad magic")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise TnsrFormatError(f"unsupported version {version}")
    off = 9
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            if code not in _DTYPES:
                raise TnsrFormatError(f"unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + size > len(buf):
                raise TnsrFormatError("truncated file")
            out[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=off).reshape(dims).copy()
            off += size
    except struct.error as exc:
        raise TnsrFormatError("truncated file") from exc
    return out


def save(path, tensors: dict) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def encode_text(text: str) -> np.ndarray:
    """Store UTF-8 text (e.g. an INI descriptor) as an f32 byte vector."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
