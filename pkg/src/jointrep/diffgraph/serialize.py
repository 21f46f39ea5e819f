"""Checkpoint files: raw little-endian float64 payload plus a JSON manifest.

``<stem>.bin`` holds every array back to back; ``<stem>.json`` lists names,
shapes and element offsets, and may carry arbitrary extra metadata.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import FormatError

FORMAT = "jointrep-arrays/1"


def save_arrays(stem: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes(order="C"))
    manifest = {"format": FORMAT, "dtype": "<f8", "count": offset, "entries": entries, "meta": dict(meta or {})}
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_arrays(stem: str | Path, expected: Mapping[str, tuple[int, ...]] | None = None):
    """Return ``(arrays, meta)``; with ``expected`` every name and shape is verified."""
    stem = Path(stem)
    try:
        manifest = json.loads(stem.with_suffix(".json").read_text())
        payload = stem.with_suffix(".bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint file missing: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {stem.with_suffix('.json')} is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("dtype") != "<f8":
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != manifest["count"]:
        raise FormatError(f"payload has {flat.size} values, manifest promises {manifest['count']}")
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["entries"]:
        shape = tuple(e["shape"])
        size = int(np.prod(shape)) if shape else 1
        arrays[e["name"]] = flat[e["offset"]: e["offset"] + size].reshape(shape).astype(np.float64)
    if expected is not None:
        missing = [k for k in expected if k not in arrays]
        extra = [k for k in arrays if k not in expected]
        if missing or extra:
            raise FormatError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise FormatError(f"parameter {name!r}: checkpoint shape {arrays[name].shape}, model shape {tuple(shape)}")
    return arrays, manifest.get("meta", {})
