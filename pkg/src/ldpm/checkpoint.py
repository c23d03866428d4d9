"""Shared checkpoint format: a directory of named raw float32 parameter
arrays plus a JSON manifest carrying the architecture config, epoch and
training metrics. Also provides the hashing helpers used by run manifests.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch


def config_hash(obj) -> str:
    """Short stable hash of any JSON-serializable config object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def state_dict_hash(state: dict[str, torch.Tensor]) -> str:
    """Hash of a model state dict (names and exact float32 bytes)."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(
    root: str | Path,
    config: dict,
    state: dict[str, torch.Tensor],
    meta: dict | None = None,
) -> None:
    """Write a checkpoint directory.

    Every tensor in ``state`` becomes ``<name>.f32`` (little-endian raw
    float32); ``manifest.json`` records the architecture config, tensor
    shapes, metadata (epoch, metrics, curves) and a content hash.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        fname = f"{name}.f32"
        arr.astype("<f4").tofile(root / fname)
        params[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format": 1,
        "config": config,
        "params": params,
        "meta": meta or {},
        "state_hash": state_dict_hash(state),
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(root: str | Path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    """Read a checkpoint directory; returns (config, state, meta)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    state: dict[str, torch.Tensor] = {}
    for name, entry in manifest["params"].items():
        arr = np.fromfile(root / entry["file"], dtype="<f4").reshape(entry["shape"])
        state[name] = torch.from_numpy(arr.copy())
    return manifest["config"], state, manifest.get("meta", {})


def checkpoint_hash(root: str | Path) -> str:
    """Content hash recorded inside a checkpoint manifest."""
    with open(Path(root) / "manifest.json") as f:
        return json.load(f)["state_hash"]
