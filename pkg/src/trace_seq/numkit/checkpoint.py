"""Checkpoint persistence: a JSON manifest plus a raw float64 blob.

A checkpoint base path ``P`` maps to two files: ``P.json`` (manifest) and
``P.bin`` (little-endian float64 values, concatenated in manifest order).
The manifest records the format version, the RNG seed the values were
produced under, each parameter's name/shape/byte offset, and the blob's
SHA-256 so loads can verify integrity.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ValidationError
from .tensor import Param

FORMAT_VERSION = 1


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def params_blob(params: Sequence[Param]) -> tuple[bytes, list[dict]]:
    """Serialize parameters (sorted by name) to blob bytes plus entries."""
    entries = []
    chunks = []
    offset = 0
    for p in sorted(params, key=lambda p: p.name):
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append(
            {"name": p.name, "shape": list(p.data.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), entries


def params_sha256(params: Sequence[Param]) -> str:
    """Content hash of the parameter values (order-independent by name)."""
    blob, _ = params_blob(params)
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(base: str | Path, params: Sequence[Param], seed: int) -> Path:
    """Write ``base``.json / ``base``.bin atomically; returns manifest path."""
    base = Path(base)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValidationError("checkpoint: duplicate parameter names")
    blob, entries = params_blob(params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "dtype": "float64",
        "byte_order": "little",
        "blob": base.name + ".bin",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "params": entries,
    }
    base.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(base.with_name(base.name + ".bin"), blob)
    _atomic_write(
        base.with_name(base.name + ".json"),
        json.dumps(manifest, indent=1, sort_keys=True).encode() + b"\n",
    )
    return base.with_name(base.name + ".json")


def checkpoint_exists(base: str | Path) -> bool:
    base = Path(base)
    return base.with_name(base.name + ".json").is_file() and base.with_name(
        base.name + ".bin"
    ).is_file()


def load_checkpoint(base: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """Read a checkpoint; returns (name -> array, seed)."""
    base = Path(base)
    manifest_path = base.with_name(base.name + ".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint {manifest_path}: unsupported format version "
            f"{manifest.get('format_version')!r}"
        )
    blob = manifest_path.with_name(manifest["blob"]).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise ValidationError(f"checkpoint {manifest_path}: blob hash mismatch")
    values: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f8", count=count, offset=entry["offset"]
        ).reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
    return values, int(manifest["seed"])


def restore(params: Iterable[Param], values: dict[str, np.ndarray], strict: bool = True) -> None:
    """Assign checkpoint values into parameters by name."""
    for p in params:
        if p.name not in values:
            if strict:
                raise ValidationError(f"checkpoint missing parameter {p.name!r}")
            continue
        v = values[p.name]
        if v.shape != p.data.shape:
            raise ValidationError(
                f"checkpoint shape mismatch for {p.name!r}: {v.shape} vs {p.data.shape}"
            )
        p.data[...] = v
