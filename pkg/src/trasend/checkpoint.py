"""Model checkpoints: a JSON manifest plus one raw little-endian buffer.

A checkpoint is a directory::

    manifest.json   format version, ModelConfig, seed, and per-parameter
                    (name, shape, group, trainable, dtype, offset, nbytes)
    params.bin      the parameter arrays back to back, little-endian

Keeping the manifest readable makes parameter groups inspectable without
loading any numbers. Writes go to a temporary sibling directory that is
renamed into place, so a reader never sees a half-written checkpoint.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ModelParams, Parameter
from .model import Model, ModelConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BUFFER = "params.bin"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedBufferError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    seed: int

    def model(self) -> Model:
        return Model(self.config, self.params, self.seed)


def save_checkpoint(model: Model, path: str | os.PathLike) -> Path:
    """Write ``model`` (parameters, config, seed) to the directory ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        le = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({
            "name": name,
            "shape": list(p.shape),
            "group": p.group,
            "trainable": p.trainable,
            "dtype": p.data.dtype.newbyteorder("<").str,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": int(model.seed),
        "parameters": entries,
    }
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        with open(tmp / BUFFER, "wb") as fh:
            for c in chunks:
                fh.write(c)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1))
        old = None
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Everything is validated before a parameter collection is handed back:
    the format version first, then buffer length, then every shape against
    a freshly built model of the stored config.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path / MANIFEST}: {err}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
    config = ModelConfig.from_dict(manifest["config"])
    entries = manifest["parameters"]
    buf = (path / BUFFER).read_bytes()
    expected = sum(e["nbytes"] for e in entries)
    if len(buf) != expected:
        raise TruncatedBufferError(f"{path / BUFFER}: {len(buf)} bytes, manifest describes {expected}")

    reference = Model.build(config, 0).params
    if set(reference) != {e["name"] for e in entries}:
        missing = sorted(set(reference) - {e["name"] for e in entries})
        extra = sorted({e["name"] for e in entries} - set(reference))
        raise ShapeMismatchError(f"{path}: parameter names differ from config (missing {missing}, extra {extra})")
    params = ModelParams()
    for e in entries:
        shape = tuple(e["shape"])
        if shape != reference[e["name"]].shape:
            raise ShapeMismatchError(
                f"{e['name']}: stored shape {shape}, config implies {reference[e['name']].shape}"
            )
        dt = np.dtype(e["dtype"])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != e["nbytes"]:
            raise ShapeMismatchError(f"{e['name']}: {e['nbytes']} bytes do not hold shape {shape}")
        arr = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape, dtype=np.int64)), offset=e["offset"])
        arr = arr.reshape(shape).astype(dt.newbyteorder("="))
        params.add(Parameter(e["name"], arr, e["group"], e["trainable"]))
    return Checkpoint(params, config, int(manifest["seed"]))
