"""Manifest + raw-blob serialization shared by templates, checkpoints and datasets.

Wire format: a JSON manifest describing named arrays (shape, dtype, byte
offset) next to a single binary blob of little-endian values. Floats are
always 32-bit on disk; integer arrays are stored as '<i4'.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


class BlobFormatError(RuntimeError):
    """Manifest and blob disagree (size, offsets, or declared layout)."""


def _disk_dtype(arr: np.ndarray) -> str:
    return "i4" if np.issubdtype(arr.dtype, np.integer) else "f4"


def write_arrays(prefix: Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write `arrays` to prefix.json + prefix.bin, preserving insertion order."""
    prefix = Path(prefix)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        kind = _disk_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind, "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": "ratsir-blob-v1",
        "total_bytes": offset,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": entries,
    }
    if meta:
        manifest["meta"] = meta
    prefix.with_suffix(".bin").write_bytes(blob)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def read_arrays(prefix: Path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    """Load arrays written by write_arrays. Returns (arrays, meta)."""
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != "ratsir-blob-v1":
        raise BlobFormatError(f"unrecognized manifest format in {prefix}.json")
    blob = prefix.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise BlobFormatError(
            f"blob size mismatch: manifest says {manifest['total_bytes']}, file has {len(blob)}"
        )
    if verify and hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise BlobFormatError(f"blob checksum mismatch for {prefix}.bin")
    out = {}
    for ent in manifest["arrays"]:
        dt = _DTYPES[ent["dtype"]]
        count = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        start = ent["offset"]
        end = start + count * dt.itemsize
        if end > len(blob):
            raise BlobFormatError(f"array {ent['name']!r} runs past end of blob")
        out[ent["name"]] = np.frombuffer(blob[start:end], dtype=dt).reshape(ent["shape"]).copy()
    return out, manifest.get("meta", {})


def sha256_file(path: Path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            buf = f.read(chunk)
            if not buf:
                break
            h.update(buf)
    return h.hexdigest()
