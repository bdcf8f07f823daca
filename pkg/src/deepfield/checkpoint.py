"""Versioned tensor checkpoints: a zip of raw payloads plus a manifest.

Layout: one ``format.json`` entry (format name, version, per-tensor name /
shape / dtype, and a free-form ``meta`` dict) followed by one
``tensors/<name>.bin`` entry per tensor holding raw little-endian bytes.

Entries are stored uncompressed with pinned timestamps and written in
sorted name order, so saving the same state twice produces byte-identical
archives — which is what makes "training is deterministic" checkable by
comparing files.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

FORMAT_NAME = "deepfield-checkpoint"
FORMAT_VERSION = 1

#: Pinned zip entry metadata (date is the zip epoch) for reproducible bytes.
_ENTRY_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """Raised when an archive is not a readable checkpoint."""


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ENTRY_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o600 << 16
    return info


def _as_array(value) -> np.ndarray:
    data = getattr(value, "data", value)   # accepts Tensor or ndarray
    return np.asarray(data)


def save_checkpoint(path: str, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors (+ JSON-able metadata) as a checkpoint archive."""
    arrays = {name: _as_array(v) for name, v in tensors.items()}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": [
            {"name": name,
             "shape": list(arrays[name].shape),
             "dtype": arrays[name].dtype.name}
            for name in sorted(arrays)
        ],
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(_entry("format.json"),
                    json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(arrays):
            arr = arrays[name]
            payload = np.ascontiguousarray(
                arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            zf.writestr(_entry(f"tensors/{name}.bin"), payload)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint -> (tensors, meta); bit-identical to what was saved."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"not a checkpoint archive: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("format.json"))
        except KeyError as exc:
            raise CheckpointError("archive has no format.json") from exc
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"malformed manifest: {exc}") from exc
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(
                f"unrecognized format {manifest.get('format')!r}")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint version {manifest.get('version')} not supported "
                f"(expected {FORMAT_VERSION})")
        tensors: dict[str, np.ndarray] = {}
        for ent in manifest.get("tensors", []):
            name = ent["name"]
            shape = tuple(int(s) for s in ent["shape"])
            dtype = np.dtype(ent["dtype"])
            try:
                payload = zf.read(f"tensors/{name}.bin")
            except KeyError as exc:
                raise CheckpointError(f"missing payload for {name!r}") from exc
            expect = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if len(payload) != expect:
                raise CheckpointError(
                    f"payload for {name!r} holds {len(payload)} bytes, "
                    f"expected {expect}")
            arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"))
            tensors[name] = arr.reshape(shape).astype(dtype, copy=True)
        return tensors, manifest.get("meta", {})
