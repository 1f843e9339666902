"""Parameter and checkpoint serialization.

A parameter set is two files: ``manifest.json`` (names, shapes, byte offsets, seed, dims)
and ``params.bin``, the concatenation of every tensor as little-endian float32 in manifest
order. Reloading is bit-exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .networks import ModelDims, STLDM, init_params
from .schedule import DiffusionSchedule

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT = "stldm-params"


class CheckpointMismatchError(ValueError):
    """Stored dims disagree with the requested configuration."""


def state_blob(model: torch.nn.Module) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_params(model: STLDM, directory: str | os.PathLike, seed: int = 0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blob = state_blob(model)
    manifest = {"format": FORMAT, "version": 1, "dtype": "float32-le", "seed": seed,
                "dims": model.dims.to_dict(), "schedule_betas": model.schedule.betas.tolist(),
                "tensors": entries}
    (directory / BLOB).write_bytes(blob)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")


def read_manifest(directory: str | os.PathLike) -> dict:
    manifest = json.loads((Path(directory) / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{directory}: not a parameter manifest")
    return manifest


def load_params(directory: str | os.PathLike, dims: ModelDims | None = None) -> STLDM:
    directory = Path(directory)
    manifest = read_manifest(directory)
    stored = ModelDims(**manifest["dims"])
    if dims is not None and dims != stored:
        raise CheckpointMismatchError(f"checkpoint dims {stored} differ from config dims {dims}")
    blob = (directory / BLOB).read_bytes()
    schedule = DiffusionSchedule(torch.tensor(manifest["schedule_betas"], dtype=torch.float64))
    model = init_params(stored, seed=manifest.get("seed", 0), schedule=schedule)
    state = {}
    for e in manifest["tensors"]:
        if e["offset"] + e["nbytes"] > len(blob):
            raise ValueError(f"{directory}: parameter blob truncated at {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    model.load_state_dict(state, strict=True)
    return model


def group_bytes(model: STLDM) -> dict[str, bytes]:
    """Raw bytes of each parameter group, for byte-level mutation checks."""
    return {
        name: b"".join(p.detach().cpu().numpy().tobytes() for p in params)
        for name, params in model.groups().items()
    }
