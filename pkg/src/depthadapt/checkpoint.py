"""Directory-based checkpoints.

A checkpoint is a directory holding ``meta.json`` plus one raw
little-endian float32 ``.bin`` file per named array.  ``meta.json``
records the format version, per-array shape/dtype, and whatever run
metadata the caller passes (config echo, iteration counter, seed).

Integer arrays (batch-norm step counters) are stored through an exact
float32 cast; values must stay below 2^24 for that cast to be lossless,
which is asserted at save time.

Writes go to a sibling temp directory first and are renamed into place,
so a crashed save never leaves a half-written checkpoint at the target
path.
"""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path

import numpy as np

from .errors import CheckpointError

CHECKPOINT_VERSION = 1
_EXACT_INT_LIMIT = 2**24


def save_checkpoint(path, arrays, meta=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            if arr.size and np.abs(arr).max() >= _EXACT_INT_LIMIT:
                raise CheckpointError(
                    f"integer array {name} exceeds the exact float32 range"
                )
        elif not np.issubdtype(arr.dtype, np.floating):
            raise CheckpointError(f"array {name} has unsupported dtype {arr.dtype}")
        fname = name + ".bin"
        (tmp / fname).write_bytes(arr.astype("<f4").tobytes())
        entries[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "file": fname}
    payload = {"version": CHECKPOINT_VERSION, "arrays": entries, "meta": meta or {}}
    with open(tmp / "meta.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (arrays, meta).  Validates everything before materializing
    any array, so a failed load never hands back partial state."""
    path = Path(path)
    meta_path = path / "meta.json"
    try:
        with open(meta_path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {meta_path}: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    entries = payload.get("arrays")
    if not isinstance(entries, dict):
        raise CheckpointError(f"malformed checkpoint meta in {meta_path}")
    for name, ent in entries.items():
        f = path / ent["file"]
        if not f.exists():
            raise CheckpointError(f"missing array file {f}")
        expect = 4 * int(np.prod(ent["shape"], dtype=np.int64))
        if f.stat().st_size != expect:
            raise CheckpointError(
                f"{f}: size {f.stat().st_size} != expected {expect} for shape {ent['shape']}"
            )
    arrays = {}
    for name, ent in entries.items():
        raw = np.frombuffer((path / ent["file"]).read_bytes(), dtype="<f4")
        arrays[name] = raw.reshape(ent["shape"]).astype(np.dtype(ent["dtype"]))
    return arrays, payload["meta"]


def module_arrays(module, prefix=""):
    """Named state of a torch module as numpy arrays, prefixed."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy().copy()
    return out


def apply_module_arrays(module, prefix, arrays):
    import torch

    state = module.state_dict()
    sub = {}
    for name in state:
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{key}: shape {tuple(arr.shape)} != {tuple(state[name].shape)}"
            )
        sub[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(state[name].dtype)
    module.load_state_dict(sub)


def sgd_state_arrays(opt, named_params, prefix):
    """Momentum buffers of a torch SGD optimizer, keyed by parameter name."""
    out = {}
    for name, p in named_params:
        st = opt.state.get(p, {})
        buf = st.get("momentum_buffer")
        if buf is not None:
            out[prefix + name + ".momentum"] = buf.detach().cpu().numpy().copy()
    return out


def load_sgd_state_arrays(opt, named_params, prefix, arrays):
    import torch

    for name, p in named_params:
        key = prefix + name + ".momentum"
        if key in arrays:
            buf = torch.from_numpy(np.ascontiguousarray(arrays[key])).to(p.dtype)
            if buf.shape != p.shape:
                raise CheckpointError(f"{key}: momentum shape mismatch")
            opt.state[p]["momentum_buffer"] = buf
