"""Weight checkpoints: one ``.npz`` container of named f32 blobs plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import Module


def save_checkpoint(module: Module, path: str | Path, manifest: dict) -> tuple[Path, Path]:
    path = Path(path)
    blobs = {f"param/{n}": p.data.astype("<f4") for n, p in module.named_parameters()}
    blobs.update({f"buffer/{n}": b.astype("<f4") for n, b in module.named_buffers()})
    npz_path = path.with_suffix(".npz")
    with open(npz_path, "wb") as fh:
        np.savez(fh, **blobs)
    meta = dict(manifest)
    meta["parameters"] = [{"name": n, "shape": list(p.shape)} for n, p in module.named_parameters()]
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return npz_path, json_path


def load_weights(module: Module, path: str | Path) -> dict:
    """Load blobs into ``module`` in place (cast to its dtypes); returns the manifest."""
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as z:
        for n, p in module.named_parameters():
            blob = z[f"param/{n}"]
            if blob.shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {blob.shape} != model shape {p.shape}")
            p.data = blob.astype(p.dtype)
        for n, b in module.named_buffers():
            b[...] = z[f"buffer/{n}"]
    return json.loads(path.with_suffix(".json").read_text())
