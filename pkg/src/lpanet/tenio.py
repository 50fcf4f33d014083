"""TEN1 tensor text format.

Header ``TEN1 <ndim> <d0> <d1> ...``, then row-major values written with nine
significant digits (one row of the trailing axis per line). Nine digits
round-trip float32 exactly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor, get_default_dtype

MAGIC = "TEN1"


def format_tensor(arr) -> str:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    header = " ".join([MAGIC, str(arr.ndim)] + [str(d) for d in arr.shape])
    if arr.size == 0:
        return header + "\n"
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim else arr.reshape(1, 1)
    body = "\n".join(" ".join(format(float(v), ".9g") for v in row) for row in rows)
    return f"{header}\n{body}\n"


def parse_tensor(text: str, source: str = "<string>", dtype=None) -> np.ndarray:
    lines = text.split("\n", 1)
    head = lines[0].split()
    if len(head) < 2 or head[0] != MAGIC:
        raise FormatError(f"{source}: missing TEN1 header")
    try:
        ndim = int(head[1])
        shape = tuple(int(d) for d in head[2:])
    except ValueError as exc:
        raise FormatError(f"{source}: malformed header {lines[0]!r}") from exc
    if len(shape) != ndim or any(d < 0 for d in shape):
        raise FormatError(f"{source}: header declares {ndim} dims but lists {shape}")
    body = lines[1].split() if len(lines) > 1 else []
    expected = int(np.prod(shape)) if shape else 1
    if len(body) != expected:
        raise FormatError(f"{source}: expected {expected} values, found {len(body)}")
    try:
        values = np.array([float(v) for v in body], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{source}: non-numeric value") from exc
    return values.reshape(shape).astype(dtype or get_default_dtype())


def save_tensor(path, arr) -> str:
    """Write ``arr`` to ``path``; returns the sha256 of the written bytes."""
    data = format_tensor(arr).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_tensor(path, dtype=None) -> np.ndarray:
    path = Path(path)
    return parse_tensor(path.read_text(), str(path), dtype)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
