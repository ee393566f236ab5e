"""Directory checkpoints: manifest.json plus one raw blob per tensor.

Blobs are little-endian float32, written in row-major order, so a
round-trip through disk is bit-exact for float32 training state.  The
manifest carries names, shapes, the optimizer scalar state and a
config hash for provenance checks at resume time.
"""

import json
import os
import shutil
import tempfile

import numpy as np

from ..errors import DataMissing

FORMAT_VERSION = 1


def _write_blob(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def _read_blob(path, shape):
    with open(path, "rb") as fh:
        raw = fh.read()
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)
    return arr.reshape(shape)


def save_checkpoint(directory, params, buffers=None, optimizer_state=None, meta=None):
    """Write params/buffers/optimizer state atomically to ``directory``.

    ``params`` maps name -> Tensor, ``buffers`` name -> ndarray.  The
    directory is replaced wholesale: a crash mid-write leaves either
    the old checkpoint or none, never a torn one.
    """
    directory = os.path.abspath(directory)
    entries = {}
    blobs = {}

    def _add(name, arr, kind):
        entries[name] = {"shape": list(np.shape(arr)), "dtype": "float32", "kind": kind, "file": f"t{len(entries):04d}.bin"}
        blobs[name] = arr

    for name, p in params.items():
        _add(name, p.data if hasattr(p, "data") else p, "param")
    for name, arr in (buffers or {}).items():
        _add(name, arr, "buffer")

    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "optimizer": None,
        "meta": dict(meta or {}),
    }
    if optimizer_state is not None:
        for name, arr in optimizer_state["m"].items():
            _add(f"opt.m.{name}", arr, "opt")
        for name, arr in optimizer_state["v"].items():
            _add(f"opt.v.{name}", arr, "opt")
        manifest["optimizer"] = {"step": int(optimizer_state["step"]), "param_names": sorted(optimizer_state["m"])}

    parent = os.path.dirname(directory) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        for name, info in entries.items():
            _write_blob(os.path.join(tmp, info["file"]), blobs[name])
        if os.path.isdir(directory):
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(directory):
    """Read a checkpoint directory back into plain arrays.

    Returns (params, buffers, optimizer_state, meta) where params and
    buffers map name -> float32 ndarray and optimizer_state is None
    when the checkpoint carries none.
    """
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataMissing(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataMissing(f"unsupported checkpoint format: {manifest.get('format_version')}")

    tensors = {}
    for name, info in manifest["tensors"].items():
        tensors[name] = _read_blob(os.path.join(directory, info["file"]), info["shape"])

    params = {n: t for n, t in tensors.items() if manifest["tensors"][n]["kind"] == "param"}
    buffers = {n: t for n, t in tensors.items() if manifest["tensors"][n]["kind"] == "buffer"}
    optimizer_state = None
    if manifest.get("optimizer"):
        opt = manifest["optimizer"]
        optimizer_state = {
            "step": opt["step"],
            "m": {n: tensors[f"opt.m.{n}"] for n in opt["param_names"]},
            "v": {n: tensors[f"opt.v.{n}"] for n in opt["param_names"]},
        }
    return params, buffers, optimizer_state, manifest.get("meta", {})
