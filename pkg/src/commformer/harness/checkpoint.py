"""Checkpoints: a JSON manifest plus one file of raw little-endian blocks.

The manifest lists every block (name, shape, dtype, byte offset) in
ParameterStore order, followed by the optimizer moments, and carries the
trainer state, model config and run config.  Loading validates everything
before any tensor is touched, so a bad checkpoint leaves the caller's
state as it was.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from commformer.errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOCKS = "tensors.bin"


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    params: dict[str, np.ndarray]
    optimizers: dict[str, dict[str, np.ndarray]]

    @property
    def trainer_state(self) -> dict:
        return self.manifest["trainer_state"]

    @property
    def model_config(self) -> dict:
        return self.manifest["model_config"]

    @property
    def run_config(self) -> str:
        return self.manifest["run_config"]


def _block_entries(arrays: list[tuple[str, np.ndarray]]) -> tuple[list[dict], list[bytes]]:
    entries, chunks, offset = [], [], 0
    for name, value in arrays:
        value = np.asarray(value)
        le = value.astype(value.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(value.shape), "dtype": le.dtype.str, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], optimizers: dict[str, dict[str, np.ndarray]],
                    trainer_state: dict, model_config: dict, run_config: str = "", extra: dict | None = None) -> Path:
    """Write atomically: build in a sibling temp dir, then rename into place."""
    path = Path(path)
    arrays = [(f"param/{n}", v) for n, v in params.items()]
    for group, state in optimizers.items():
        arrays += [(f"opt/{group}/{n}", v) for n, v in state.items()]
    entries, chunks = _block_entries(arrays)
    data = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blocks": entries,
        "blocks_sha256": hashlib.sha256(data).hexdigest(),
        "trainer_state": trainer_state,
        "model_config": model_config,
        "run_config": run_config,
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / BLOCKS).write_bytes(data)
    (tmp / MANIFEST).write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest at {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CheckpointError(f"corrupt checkpoint manifest at {path}: not an object")
    found = manifest.get("format_version")
    if found != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {found} but this build reads version {FORMAT_VERSION}")
    for key in ("blocks", "blocks_sha256", "trainer_state", "model_config"):
        if key not in manifest:
            raise CheckpointError(f"corrupt checkpoint manifest at {path}: missing {key!r}")
    try:
        data = (path / BLOCKS).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blocks at {path}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != manifest["blocks_sha256"]:
        raise CheckpointError(f"checkpoint blocks at {path} do not match the manifest digest")
    params: dict[str, np.ndarray] = {}
    optimizers: dict[str, dict[str, np.ndarray]] = {}
    try:
        for entry in manifest["blocks"]:
            dtype = np.dtype(entry["dtype"])
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            if start + nbytes > len(data):
                raise CheckpointError(f"block {entry['name']} runs past the end of the data")
            value = np.frombuffer(data[start:start + nbytes], dtype=dtype).reshape(entry["shape"])
            value = value.astype(dtype.newbyteorder("="))
            kind, _, rest = entry["name"].partition("/")
            if kind == "param":
                params[rest] = value
            elif kind == "opt":
                group, _, name = rest.partition("/")
                optimizers.setdefault(group, {})[name] = value
            else:
                raise CheckpointError(f"unknown block kind {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest at {path}: {exc}") from exc
    return Checkpoint(path=path, manifest=manifest, params=params, optimizers=optimizers)


def save_trainer(path: str | Path, trainer, run_config: str = "", extra: dict | None = None) -> Path:
    """Snapshot model parameters, optimizer moments and trainer state."""
    return save_checkpoint(path, trainer.model.store.state_dict(), trainer.optimizer_states(), trainer.state_dict(),
                           trainer.model.config.to_dict(), run_config, extra)


def restore_trainer(ckpt: Checkpoint, trainer, optimizers: bool = True) -> None:
    """Load ``ckpt`` into ``trainer``; raises before mutating on a mismatch."""
    store = trainer.model.store
    missing = [n for n in store.names() if n not in ckpt.params]
    extra = [n for n in ckpt.params if n not in store]
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={extra}")
    for name, t in store.items():
        if ckpt.params[name].shape != t.shape:
            raise CheckpointError(f"{name}: stored shape {ckpt.params[name].shape} != {t.shape}")
    store.load_state_dict(ckpt.params)
    trainer.load_state_dict(ckpt.trainer_state, ckpt.optimizers if optimizers else None)
