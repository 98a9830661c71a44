"""On-disk formats: binary tensors, CSV tables and JSON manifests, all written atomically.

A tensor file is::

    b"CRSAE1\\n"            magic
    b"<f8"                 dtype tag (float64, little-endian)
    uint32 LE              rank
    rank x uint64 LE       dims
    8 * prod(dims) bytes   row-major payload
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "TensorFormatError",
    "atomic_write_bytes",
    "atomic_write_text",
    "config_hash",
    "read_csv",
    "read_json",
    "read_tensor",
    "tensor_bytes",
    "write_csv",
    "write_json",
    "write_tensor",
]

MAGIC = b"CRSAE1\n"
DTYPE_TAG = b"<f8"
_HEADER = len(MAGIC) + len(DTYPE_TAG) + 4


class TensorFormatError(ValueError):
    """A tensor file is truncated, padded or not a tensor file at all."""


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def tensor_bytes(array) -> bytes:
    a = np.asarray(array)
    if a.dtype.kind not in "fiub":
        raise TypeError(f"cannot store dtype {a.dtype} as float64")
    a = np.asarray(a, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + DTYPE_TAG + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def write_tensor(path, array) -> Path:
    return atomic_write_bytes(path, tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER or not data.startswith(MAGIC):
        raise TensorFormatError(f"{path}: not a tensor file (bad magic)")
    tag = data[len(MAGIC) : len(MAGIC) + len(DTYPE_TAG)]
    if tag != DTYPE_TAG:
        raise TensorFormatError(f"{path}: unsupported dtype tag {tag!r}")
    (rank,) = struct.unpack_from("<I", data, len(MAGIC) + len(DTYPE_TAG))
    dims_end = _HEADER + 8 * rank
    if len(data) < dims_end:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", data, _HEADER)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) - dims_end != 8 * count:
        raise TensorFormatError(
            f"{path}: payload has {len(data) - dims_end} bytes, expected {8 * count} for shape {dims}"
        )
    return np.frombuffer(data, dtype="<f8", count=count, offset=dims_end).reshape(dims).astype(np.float64)


def write_csv(path, header, rows) -> Path:
    """RFC-4180 CSV (CRLF line ends, minimal quoting) with a header row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
