"""Atomic artifact writes, hashing, and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Sequence


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def atomic_write_json(path: str | Path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def atomic_write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)
    return path


def write_manifest(
    out_dir: str | Path,
    stage: str,
    config_hash: str,
    seed: int,
    inputs: Sequence[str | Path],
    outputs: Sequence[str | Path],
    wall_time_s: float,
) -> Path:
    """Hash-linked run record: what went in, what came out, under which config."""
    out_dir = Path(out_dir)

    def hashes(paths):
        return {
            str(Path(p).relative_to(out_dir)) if str(p).startswith(str(out_dir)) else str(p):
            sha256_file(p)
            for p in paths
        }

    manifest = {
        "stage": stage,
        "config_sha256": config_hash,
        "seed": seed,
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
        "wall_time_s": round(wall_time_s, 3),
    }
    return atomic_write_json(out_dir / f"manifest_{stage}.json", manifest)
