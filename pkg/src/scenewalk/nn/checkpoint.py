"""Parameter checkpoints: one zip archive per model.

Layout:
  manifest.json  - seed, config hash, ordered name -> shape map
  params.bin     - concatenated little-endian float64 payloads, manifest order
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .tensor import Parameter


def save_checkpoint(
    path: str | Path,
    params: list[Parameter],
    seed: int,
    config_hash: str,
    extra: dict | None = None,
) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate parameter names: {dupes}")
    manifest = {
        "format": 1,
        "seed": seed,
        "config_hash": config_hash,
        "params": {p.name: list(p.data.shape) for p in params},
        "order": names,
    }
    if extra:
        manifest["extra"] = extra
    buf = io.BytesIO()
    for p in params:
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr("params.bin", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("params.bin")
    values: dict[str, np.ndarray] = {}
    offset = 0
    for name in manifest["order"]:
        shape = tuple(manifest["params"][name])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        values[name] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    if offset != len(raw):
        raise CheckpointError(f"payload size mismatch in {path}")
    return manifest, values


def apply_checkpoint(params: list[Parameter], values: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in values:
            raise CheckpointError(f"checkpoint missing parameter {p.name!r}")
        stored = values[p.name]
        if stored.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: checkpoint {stored.shape}, "
                f"model {p.data.shape}"
            )
        p.data[...] = stored
