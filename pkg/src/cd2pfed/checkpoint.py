"""Checkpoints: a JSON manifest plus a flat little-endian float64 payload."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .decouple import PartitionPlan
from .nn import Architecture, ModelParams


@dataclass
class Checkpoint:
    params: ModelParams
    arch: Architecture
    plan: Optional[PartitionPlan]
    round: int
    config_hash: str = ""
    client_id: Optional[int] = None


def save_checkpoint(stem, ckpt: Checkpoint) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.bin``."""
    stem = Path(stem)
    tensors = ckpt.params.tensors()
    manifest = {
        "architecture": ckpt.arch.to_dict(),
        "plan": ckpt.plan.to_dict() if ckpt.plan is not None else None,
        "round": ckpt.round,
        "config_hash": ckpt.config_hash,
        "client_id": ckpt.client_id,
        "dtype": "<f8",
        "tensors": [list(t.shape) for t in tensors],
    }
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors)
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=1))
    bin_path.write_bytes(payload)
    return json_path, bin_path


def load_checkpoint(stem) -> Checkpoint:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    shapes = [tuple(s) for s in manifest["tensors"]]
    expected = sum(int(np.prod(s)) for s in shapes)
    if expected != flat.size:
        raise ValueError(f"checkpoint payload has {flat.size} values, manifest needs {expected}")
    tensors, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        tensors.append(flat[off:off + n].reshape(s).astype(np.float64))
        off += n
    arch = Architecture.from_dict(manifest["architecture"])
    if [tuple(w) for pair in arch.param_shapes() for w in pair] != shapes:
        raise ValueError("checkpoint tensors do not match its architecture")
    plan = PartitionPlan.from_dict(manifest["plan"]) if manifest["plan"] else None
    return Checkpoint(ModelParams.from_tensors(tensors), arch, plan, manifest["round"],
                      manifest["config_hash"], manifest.get("client_id"))
