"""Binary weights container.

Layout (all integers little-endian u32)::

    b"BAFW" | version | count | count x record | header_len | header (UTF-8)
    record = name_len | name (UTF-8) | rank | dims[rank] | payload (f32 LE)

The trailing header is plain ``key = value`` text used for network
hyperparameters and training-schedule state, so a file describes itself.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BAFW"
VERSION = 1


class WeightsFormatError(ValueError):
    """The weights file is malformed or does not match what was expected."""


def encode(tensors: Mapping[str, np.ndarray], header: Mapping[str, str] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = "".join(f"{k} = {v}\n" for k, v in (header or {}).items()).encode("utf-8")
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if blob[:4] != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    pos = 4

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise WeightsFormatError("truncated weights file")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights format version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        dims = read(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(blob):
            raise WeightsFormatError(f"truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    header: dict[str, str] = {}
    if pos < len(blob):
        (hlen,) = read("<I")
        for line in blob[pos:pos + hlen].decode("utf-8").splitlines():
            if "=" in line:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
    return tensors, header


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
         header: Mapping[str, str] | None = None) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(tensors, header))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())
