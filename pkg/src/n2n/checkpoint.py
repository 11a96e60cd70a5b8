"""Portable checkpoints: a JSON manifest plus a raw little-endian float64 blob.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
Both files are written atomically and deterministically, so saving the same
parameters twice gives byte-identical files.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .diffcore import ParamStore
from .flownet import CinnModel

FORMAT_TAG = "N2N-CKPT/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(OSError):
    pass


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _param_table(store: ParamStore):
    table, offset = [], 0
    for name, p in store.items():
        nbytes = p.data.size * 8
        table.append({"name": name, "shape": list(p.data.shape), "offset": offset, "length": nbytes})
        offset += nbytes
    return table


def save_store(store: ParamStore, path, kind: str, architecture: dict, extra=None):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": FORMAT_TAG,
        "kind": kind,
        "architecture": architecture,
        "params": _param_table(store),
    }
    if extra:
        manifest.update(extra)
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in store.items())
    _atomic_write(os.path.join(path, BLOB), blob)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    _atomic_write(os.path.join(path, MANIFEST), text.encode("utf-8"))
    return manifest


def read_manifest(path) -> dict:
    try:
        with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"manifest is not valid JSON: {err}") from err
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"format tag mismatch: expected {FORMAT_TAG!r}, "
                              f"got {manifest.get('format')!r}")
    return manifest


def load_into(store: ParamStore, path, manifest=None):
    """Fill ``store`` from the checkpoint, validating names, shapes and length."""
    manifest = manifest or read_manifest(path)
    with open(os.path.join(path, BLOB), "rb") as fh:
        blob = fh.read()
    table = manifest["params"]
    names = [row["name"] for row in table]
    if names != store.names():
        missing = sorted(set(store.names()) ^ set(names))
        raise CheckpointError(f"parameter table does not match the architecture: {missing[:3]}")
    expected = sum(row["length"] for row in table)
    if len(blob) < expected:
        raise CheckpointError(f"truncated blob: {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise CheckpointError(f"blob has {len(blob) - expected} trailing bytes")
    offset = 0
    for row in table:
        name, shape = row["name"], tuple(row["shape"])
        want = store[name].data.shape
        if shape != want:
            raise CheckpointError(f"parameter {name!r}: manifest shape {list(shape)}, "
                                  f"architecture expects {list(want)}")
        if row["offset"] != offset or row["length"] != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"parameter {name!r}: inconsistent offset/length")
        values = np.frombuffer(blob, dtype="<f8", count=row["length"] // 8, offset=offset)
        store.set(name, values.astype(np.float64).reshape(shape))
        offset += row["length"]
    return manifest


def save_checkpoint(model: CinnModel, path, seeds=None):
    extra = {"permutations": [p.tolist() for p in model.permutations], "seeds": seeds or {}}
    return save_store(model.store, path, "cinn", model.architecture(), extra)


def load_checkpoint(path) -> CinnModel:
    manifest = read_manifest(path)
    if manifest.get("kind") != "cinn":
        raise CheckpointError(f"expected a cinn checkpoint, got {manifest.get('kind')!r}")
    arch = dict(manifest["architecture"])
    perms = manifest.get("permutations")
    if perms is None or len(perms) != arch.get("n_blocks"):
        raise CheckpointError("permutation list does not match n_blocks")
    try:
        model = CinnModel(arch["dim"], arch["dim_cond"], n_blocks=arch["n_blocks"],
                          hidden_width=arch["hidden_width"], embed_width=arch["embed_width"],
                          dim_h=arch["dim_h"], alpha=arch["alpha"],
                          perms=[np.asarray(p, dtype=np.int64) for p in perms])
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"invalid architecture in manifest: {err}") from err
    load_into(model.store, path, manifest)
    model.mark_initialized()
    return model
