"""Versioned model checkpoints: a zip of named float64 tensors.

Layout: ``manifest.json`` (format version, model config, schema, param
names, sha256 checksum, optimizer step, rng state) plus one ``.npy``
entry per parameter and, optionally, per Adam moment. The checksum
covers the raw parameter bytes in manifest order; load verifies it and
the format version before touching the model, and a round trip restores
predictions bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from .bayeslayers import StochasticityConfig
from .seqmodel import CohortSchema, ModelConfig, SequenceModel

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or version-incompatible checkpoint."""


@dataclass
class CheckpointBundle:
    model: SequenceModel
    global_step: int
    optimizer_state: dict | None
    rng_state: dict | None


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _load_npy(data):
    return np.load(io.BytesIO(data), allow_pickle=False)


def save_checkpoint(model, path, optimizer=None, global_step=0, rng_state=None):
    """Write the model (and optionally Adam state) to ``path``."""
    params = model.parameters()
    names = sorted(params)
    digest = hashlib.sha256()
    for name in names:
        digest.update(params[name].data.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "schema": asdict(model.schema),
        "param_names": names,
        "checksum": digest.hexdigest(),
        "global_step": int(global_step),
        "optimizer_t": None if optimizer is None else optimizer.t,
        "rng_state": rng_state,
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name in names:
            zf.writestr(f"params/{name}.npy", _npy_bytes(params[name].data))
        if optimizer is not None:
            state = optimizer.state_dict()
            for name in names:
                zf.writestr(f"opt_m/{name}.npy", _npy_bytes(state["m"][name]))
                zf.writestr(f"opt_v/{name}.npy", _npy_bytes(state["v"][name]))


def load_checkpoint(path):
    """Rebuild a model from ``path``; returns a CheckpointBundle."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as e:
            raise CheckpointError(f"missing or invalid manifest: {e}") from e
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format version {version!r} "
                f"(expected {FORMAT_VERSION})"
            )
        cfg_dict = dict(manifest["config"])
        cfg_dict["stochasticity"] = StochasticityConfig(**cfg_dict["stochasticity"])
        config = ModelConfig(**cfg_dict)
        schema = CohortSchema(**manifest["schema"])
        model = SequenceModel(config, schema)
        params = model.parameters()
        names = manifest["param_names"]
        if sorted(names) != sorted(params):
            raise CheckpointError("checkpoint parameters do not match the model")
        arrays = {}
        digest = hashlib.sha256()
        for name in names:
            try:
                arr = _load_npy(zf.read(f"params/{name}.npy"))
            except (KeyError, ValueError, OSError) as e:
                raise CheckpointError(f"cannot read parameter {name!r}: {e}") from e
            if arr.shape != params[name].data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {arr.shape}, "
                    f"expected {params[name].data.shape}"
                )
            digest.update(np.ascontiguousarray(arr).tobytes())
            arrays[name] = arr
        if digest.hexdigest() != manifest["checksum"]:
            raise CheckpointError("checksum mismatch: checkpoint is corrupt")
        for name, arr in arrays.items():
            params[name].data[...] = arr
        optimizer_state = None
        if manifest.get("optimizer_t") is not None:
            optimizer_state = {
                "t": manifest["optimizer_t"],
                "m": {n: _load_npy(zf.read(f"opt_m/{n}.npy")) for n in names},
                "v": {n: _load_npy(zf.read(f"opt_v/{n}.npy")) for n in names},
            }
        return CheckpointBundle(
            model=model,
            global_step=int(manifest.get("global_step", 0)),
            optimizer_state=optimizer_state,
            rng_state=manifest.get("rng_state"),
        )
