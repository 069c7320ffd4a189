"""Parameter checkpoints as ``.npz`` archives.

Each parameter is stored under ``theta/<name>``; a UTF-8 JSON blob under
``__meta__`` holds the model dims, the canonical parameter order and any
caller metadata. Arrays are written raw, so save/load is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .exceptions import MetaMFError
from .metanet import MetaParams, ModelDims

FORMAT = "metamf-checkpoint"
VERSION = 1


def save_checkpoint(path, theta: MetaParams, metadata: dict | None = None) -> Path:
    path = Path(path)
    meta = {"format": FORMAT, "version": VERSION, "dims": theta.dims.to_dict(),
            "names": list(theta.arrays), "metadata": metadata or {}}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    arrays = {f"theta/{k}": v for k, v in theta.items()}
    with path.open("wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    return path


def load_checkpoint(path) -> tuple[MetaParams, dict]:
    """Return ``(theta, metadata)``; shapes are validated against the stored dims."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise MetaMFError(f"{path} is not a metamf checkpoint")
        meta = json.loads(data["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format") != FORMAT:
            raise MetaMFError(f"{path}: unknown format {meta.get('format')!r}")
        dims = ModelDims(**meta["dims"])
        theta = MetaParams(dims, {k: np.array(data[f"theta/{k}"]) for k in meta["names"]})
    theta.check_shapes()
    return theta, meta["metadata"]
