"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic   8 bytes  b"MEGANCKP"
    version u32
    count   u32
    count x record:
        name_len u32, name UTF-8 bytes
        ndim u32, dims u64 * ndim
        values f64 * prod(dims), row-major

Records hold parameters followed by batch-norm running statistics.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from megan.errors import CheckpointError

MAGIC = b"MEGANCKP"
VERSION = 1


def save(path: str | Path, entries: Iterable[tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    entries = list(entries)
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError(f"duplicate entry names in checkpoint for {path}")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return out


def restore(path: str | Path, targets: Iterable[tuple[str, np.ndarray]]) -> None:
    """Copy checkpoint values into ``targets`` in place, checking names and shapes exactly."""
    stored = load(path)
    targets = list(targets)
    expected = [n for n, _ in targets]
    missing = [n for n in expected if n not in stored]
    extra = [n for n in stored if n not in set(expected)]
    if missing or extra:
        raise CheckpointError(f"{path}: name mismatch (missing {missing}, unexpected {extra})")
    for name, arr in targets:
        src = stored[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {src.shape}, model expects {arr.shape}")
    for name, arr in targets:
        arr[...] = stored[name]
