"""Named-tensor binary container.

Layout (all integers unsigned 64-bit little-endian):

    header:  version | tensor count | meta byte length | meta (UTF-8 JSON)
    record:  name byte length | name (UTF-8) | rank | dims... | float64 LE data

The meta blob carries small run metadata (vocabulary token list, config hash,
seed). Round-trips are bit-exact: float64 payloads are written with tobytes()
and read back with frombuffer().
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .tensor import Tensor

FORMAT_VERSION = 1
_U64 = struct.Struct("<Q")


def _write_u64(f, value: int) -> None:
    f.write(_U64.pack(value))


def _read_u64(f) -> int:
    raw = f.read(8)
    if len(raw) != 8:
        raise InputError("checkpoint truncated while reading a u64 field")
    return _U64.unpack(raw)[0]


def save_tensors(path, named: dict[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    """Write named arrays to ``path``. Names must be unique (dict enforces)."""
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        _write_u64(f, FORMAT_VERSION)
        _write_u64(f, len(named))
        _write_u64(f, len(meta_bytes))
        f.write(meta_bytes)
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            # note: not ascontiguousarray (it promotes 0-d to 1-d); tobytes()
            # below already serializes any layout in C order
            arr = np.asarray(arr, dtype="<f8")
            name_b = name.encode("utf-8")
            _write_u64(f, len(name_b))
            f.write(name_b)
            _write_u64(f, arr.ndim)
            for dim in arr.shape:
                _write_u64(f, dim)
            f.write(arr.tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by save_tensors; returns (arrays, meta)."""
    path = Path(path)
    with open(path, "rb") as f:
        version = _read_u64(f)
        if version != FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint format version {version}")
        count = _read_u64(f)
        meta_len = _read_u64(f)
        meta_raw = f.read(meta_len)
        if len(meta_raw) != meta_len:
            raise InputError("checkpoint truncated inside the meta block")
        meta = json.loads(meta_raw.decode("utf-8")) if meta_len else {}
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u64(f)
            name_raw = f.read(name_len)
            if len(name_raw) != name_len:
                raise InputError("checkpoint truncated inside a tensor name")
            name = name_raw.decode("utf-8")
            rank = _read_u64(f)
            shape = tuple(_read_u64(f) for _ in range(rank))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
            raw = f.read(n_bytes)
            if len(raw) != n_bytes:
                raise InputError(f"checkpoint truncated inside data for '{name}'")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        trailing = f.read(1)
        if trailing:
            raise InputError("checkpoint has trailing bytes after the last record")
    return out, meta
