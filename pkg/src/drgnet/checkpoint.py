"""Deterministic checkpoint container.

Layout: magic, format version, a length-prefixed JSON header (parameter
names, shapes, groups, precision, optional metadata), then each parameter's
raw little-endian bytes in header order. Writing the same store twice yields
byte-identical files; save/load round-trips are bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .errors import CheckpointError
from .matrix import Matrix, dtype_of

_MAGIC = b"DRGNCKPT"
_VERSION = 1


def save_checkpoint(path: str | Path, params: ParamStore, meta: dict | None = None) -> None:
    header = {
        "version": _VERSION,
        "precision": params.precision(),
        "meta": meta or {},
        "params": [
            {"name": p.name, "rows": p.value.rows, "cols": p.value.cols, "group": p.group}
            for p in params
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in params:
            arr = np.ascontiguousarray(p.value.data, dtype=p.value.data.dtype)
            fh.write(arr.astype("<" + arr.dtype.str[1:], copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(_MAGIC)
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    offset += hlen
    dtype = np.dtype("<" + dtype_of(header["precision"]).str[1:])
    store = ParamStore()
    for spec in header["params"]:
        rows, cols = int(spec["rows"]), int(spec["cols"])
        nbytes = rows * cols * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data for {spec['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=offset).reshape(rows, cols)
        offset += nbytes
        store.add(spec["name"], Matrix(arr.astype(dtype_of(header["precision"]))), spec["group"])
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return store, header.get("meta", {})


def clone_params(params: ParamStore) -> ParamStore:
    out = ParamStore()
    for p in params:
        out.add(p.name, p.value.copy(), p.group)
    return out


def restore_params(target: ParamStore, source: ParamStore) -> None:
    """Copy values from source into target (shapes and names must match)."""
    if target.names() != source.names():
        raise CheckpointError("parameter name mismatch while restoring")
    for p in target:
        src = source[p.name]
        if src.value.shape != p.value.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}")
        p.value.data[:] = src.value.data
