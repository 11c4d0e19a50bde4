"""Checkpoint files: a JSON manifest next to a raw little-endian float64 blob.

``save_checkpoint(model, "run/model")`` writes ``run/model.json`` and
``run/model.bin``. The manifest holds the format version, architecture,
schema (vocabularies and min-max statistics included) with its digest, the
hyper-parameters, and for every tensor its name, shape, byte offset and
length. Parameters and running statistics (``buffer:`` prefix) are both
stored. Nothing time-dependent is written, so identical models produce
identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FibinetError
from .features import FeatureSchema
from .models import CTRModel, ModelHyper, build

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def checkpoint_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def _tensors(model: CTRModel):
    for p in model.parameters():
        yield p.name, p.value
    for name, buf in sorted(model.buffers().items()):
        yield f"buffer:{name}", buf


def save_checkpoint(model: CTRModel, path, extra: dict | None = None) -> tuple[Path, Path]:
    manifest_path, blob_path = checkpoint_paths(path)
    entries, offset = [], 0
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(blob_path, "wb") as fh:
        for name, value in _tensors(model):
            raw = np.ascontiguousarray(value, dtype=_DTYPE).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(value.shape), "offset": offset,
                            "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch.value,
        "seed": model.seed,
        "schema_digest": model.schema.digest(),
        "schema": model.schema.to_dict(),
        "hyper": model.hyper.to_dict(),
        "blob": blob_path.name,
        "blob_nbytes": offset,
        "tensors": entries,
        "extra": extra or {},
    }
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path, blob_path


def read_manifest(path) -> dict:
    manifest_path, _ = checkpoint_paths(path)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {exc}") from None


def load_checkpoint(path) -> CTRModel:
    manifest_path, _ = checkpoint_paths(path)
    manifest = read_manifest(path)
    for key in ("format_version", "arch", "schema", "hyper", "tensors", "blob"):
        if key not in manifest:
            raise CheckpointError(f"{manifest_path}: manifest is missing field {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{manifest_path}: format_version {manifest['format_version']} "
                              f"is not supported (expected {FORMAT_VERSION})")
    try:
        schema = FeatureSchema.from_dict(manifest["schema"])
        hyper = ModelHyper.from_dict(manifest["hyper"])
        if schema.digest() != manifest.get("schema_digest", schema.digest()):
            raise CheckpointError(f"{manifest_path}: schema digest mismatch")
        model = build(manifest["arch"], schema, hyper, seed=manifest.get("seed", 0), init=False)
    except CheckpointError:
        raise
    except (FibinetError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{manifest_path}: cannot rebuild model: {exc}") from None

    blob_path = manifest_path.with_name(manifest["blob"])
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {blob_path}: {exc}") from None
    if len(blob) != manifest.get("blob_nbytes", len(blob)):
        raise CheckpointError(f"{blob_path}: expected {manifest['blob_nbytes']} bytes, "
                              f"found {len(blob)} (truncated or corrupt)")

    targets = dict(_tensors(model))
    stored = {e["name"]: e for e in manifest["tensors"]}
    for name in targets:
        if name not in stored:
            raise CheckpointError(f"{manifest_path}: tensor {name!r} missing from checkpoint")
    for name, entry in stored.items():
        if name not in targets:
            raise CheckpointError(f"{manifest_path}: unexpected tensor {name!r}")
        target = targets[name]
        if tuple(entry["shape"]) != target.shape:
            raise CheckpointError(f"{manifest_path}: tensor {name!r} has shape "
                                  f"{tuple(entry['shape'])}, model expects {target.shape}")
        start, n = entry["offset"], entry["nbytes"]
        if n != target.size * _DTYPE.itemsize or start + n > len(blob):
            raise CheckpointError(f"{blob_path}: tensor {name!r} lies outside the blob")
        target[...] = np.frombuffer(blob, dtype=_DTYPE, count=target.size,
                                    offset=start).reshape(target.shape)
    model.eval()
    return model

