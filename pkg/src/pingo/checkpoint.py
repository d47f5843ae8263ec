"""Parameter checkpoints: a JSON manifest followed by one float64 blob.

File layout::

    8 bytes   little-endian uint64, length of the JSON manifest in bytes
    n bytes   UTF-8 JSON manifest
    rest      raw little-endian float64 values, entries back to back

The manifest holds ``{"format": ..., "entries": [{name, shape, dtype,
offset, nbytes}], "metadata": {...}}`` where offsets are relative to the
start of the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT = "pingo-checkpoint/1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(arr)), "dtype": "float64", "offset": offset, "nbytes": len(buf)}
        )
        chunks.append(buf)
        offset += len(buf)
    manifest = json.dumps(
        {"format": FORMAT, "entries": entries, "metadata": metadata or {}}, sort_keys=True
    ).encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for c in chunks:
                fh.write(c)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8 : 8 + n].decode())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    blob = memoryview(raw)[8 + n :]
    arrays = {}
    for e in manifest["entries"]:
        if e["dtype"] != "float64":
            raise ValueError(f"{path}: entry {e['name']} has dtype {e['dtype']}, expected float64")
        if e["offset"] + e["nbytes"] > len(blob):
            raise ValueError(f"{path}: entry {e['name']} runs past the end of the file")
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["metadata"]
