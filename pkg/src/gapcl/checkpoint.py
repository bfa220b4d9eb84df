"""Checkpoint container: JSON manifest followed by raw float64 tensor payloads.

Layout: u32 LE manifest length, UTF-8 JSON manifest, then each tensor's
float64 little-endian C-order bytes concatenated in manifest order.  The
manifest carries ``tensors`` (name + shape, fixing the payload order) plus
arbitrary metadata (hyperparameters, seeds).  Values round-trip exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np


class CheckpointError(ValueError):
    """Raised on malformed checkpoint files."""


def save_tensors(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors atomically; insertion order of ``tensors`` is preserved."""
    manifest = dict(meta)
    manifest["tensors"] = [
        {"name": name, "shape": list(t.shape)} for name, t in tensors.items()
    ]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in tensors.values():
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes(order="C"))
    os.replace(tmp, str(path))


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4:
            raise CheckpointError("unexpected end of data in header")
        (manifest_len,) = struct.unpack("<I", head)
        blob = f.read(manifest_len)
        if len(blob) != manifest_len:
            raise CheckpointError("unexpected end of data in manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"malformed manifest: {e}") from e
        if "tensors" not in manifest:
            raise CheckpointError("manifest missing tensor index")
        tensors: dict[str, np.ndarray] = {}
        for entry in manifest.pop("tensors"):
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError("unexpected end of data in payload")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(
                np.float64).reshape(shape)
        if f.read(1):
            raise CheckpointError("trailing bytes after payload")
    return manifest, tensors
