"""Named-tensor checkpoints: an uncompressed ``.npz`` with a JSON header entry.

Arrays are stored as raw float64, so save -> load is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

HEADER_KEY = "__header__"


def save_tensors(path, kind: str, config: Mapping, tensors: Mapping[str, np.ndarray], extra: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": kind, "config": dict(config), "names": sorted(tensors), "extra": dict(extra or {})}
    arrays = {f"t/{name}": np.asarray(tensors[name], dtype=np.float64) for name in tensors}
    arrays[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_tensors(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return (config, tensors, extra); ``kind`` is checked when given."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data[HEADER_KEY]))
        if kind is not None and header["kind"] != kind:
            raise ValueError(f"{path}: checkpoint holds a {header['kind']!r}, expected {kind!r}")
        tensors = {name: np.array(data[f"t/{name}"]) for name in header["names"]}
    return header["config"], tensors, header.get("extra", {})
