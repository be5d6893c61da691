"""Checkpoints: a text manifest plus one flat little-endian float64 file per array.

Layout of a checkpoint directory::

    manifest.txt   key=value lines (format, dim, vocab sizes, lam, seed, array list)
    words.txt      encoder vocabulary, one word per line (full-model checkpoints)
    <name>.f64     raw array values in C order

Arrays are listed in the manifest as ``array.<k>=<name>:<d0>x<d1>...`` in
storage order. The KG tables always come first (entities, relations,
timestamps, ``w_ts``), so an embedding-only checkpoint written by pretraining
is a prefix of a full one.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import CheckpointError
from .model import ModelConfig, TkgqaModel
from .store import TkgStore
from .tkge import ComplexEmbeddingTable, OrderHead

FORMAT = "tkgqa-checkpoint-1"
KG_ORDER = ("kg.entities", "kg.relations", "kg.timestamps", "kg.w_ts")
_DTYPE = "<f8"


def _shape_text(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def _ordered(arrays: dict) -> list:
    first = [k for k in KG_ORDER if k in arrays]
    return first + [k for k in arrays if k not in first]


def write_checkpoint(directory, manifest: dict, arrays: dict, words=None) -> Path:
    """Write ``arrays`` (name -> ndarray or Tensor) with a manifest of scalar metadata."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"format={FORMAT}"] + [f"{k}={v}" for k, v in manifest.items()]
    for k, name in enumerate(_ordered(arrays)):
        values = arrays[name].values if isinstance(arrays[name], nx.Tensor) else np.asarray(arrays[name])
        values = np.array(values, dtype=_DTYPE, order="C")
        values.tofile(out / f"{name}.f64")
        lines.append(f"array.{k}={name}:{_shape_text(values.shape)}")
    if words is not None:
        (out / "words.txt").write_text("".join(f"{w}\n" for w in words), encoding="utf-8")
        lines.append(f"words={len(words)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_checkpoint(directory):
    """Return ``(manifest, arrays, words)``; ``words`` is None for embedding-only checkpoints."""
    root = Path(directory)
    try:
        text = (root / "manifest.txt").read_text(encoding="utf-8")
    except OSError:
        raise CheckpointError(f"no manifest in {root}") from None
    manifest = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            manifest[key] = value
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    arrays = {}
    k = 0
    while f"array.{k}" in manifest:
        name, _, shape_text = manifest[f"array.{k}"].rpartition(":")
        shape = _parse_shape(shape_text)
        try:
            flat = np.fromfile(root / f"{name}.f64", dtype=_DTYPE)
        except OSError:
            raise CheckpointError(f"missing array file for {name}") from None
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: expected {shape}, file holds {flat.size} values")
        arrays[name] = flat.reshape(shape).astype(np.float64)
        k += 1
    words = None
    if "words" in manifest:
        words = (root / "words.txt").read_text(encoding="utf-8").splitlines()
        if len(words) != int(manifest["words"]):
            raise CheckpointError("words.txt does not match the manifest word count")
    return manifest, arrays, words


def _vocab_manifest(store: TkgStore) -> dict:
    return {"entities": store.num_entities, "relations": store.num_relations,
            "timestamps": store.num_timestamps}


def _check_vocab(manifest: dict, store: TkgStore):
    for key, size in _vocab_manifest(store).items():
        if int(manifest.get(key, -1)) != size:
            raise CheckpointError(f"vocabulary mismatch: checkpoint has {manifest.get(key)} {key}, data has {size}")


def save_embeddings(directory, store: TkgStore, tables: ComplexEmbeddingTable, head: OrderHead, seed: int):
    arrays = {f"kg.{k}": v for k, v in tables.named_arrays().items()}
    arrays["kg.w_ts"] = head.w_ts
    manifest = {"kind": "embeddings", "dim": tables.dim, **_vocab_manifest(store), "lam": head.lam, "seed": seed}
    return write_checkpoint(directory, manifest, arrays)


def load_embeddings(directory, store: TkgStore):
    """Return ``(tables, order_head, manifest)`` from any checkpoint."""
    manifest, arrays, _ = read_checkpoint(directory)
    _check_vocab(manifest, store)
    offset = arrays.get("kg.time_offset")
    tables = ComplexEmbeddingTable(arrays["kg.entities"], arrays["kg.relations"], arrays["kg.timestamps"],
                                   time_offset=None if offset is None else nx.parameter(offset))
    head = OrderHead(nx.parameter(arrays["kg.w_ts"]), float(manifest["lam"]))
    return tables, head, manifest


_MODEL_KEYS = {f: type(v) for f, v in vars(ModelConfig()).items()}


def save_model(directory, model: TkgqaModel, seed: int, extra: dict | None = None) -> Path:
    cfg = model.config
    manifest = {"kind": "model", "dim": cfg.dim, **_vocab_manifest(model.store), "lam": model.order_head.lam,
                "seed": seed}
    manifest.update({f"model.{k}": v for k, v in vars(cfg).items()})
    manifest.update(extra or {})
    return write_checkpoint(directory, manifest, model.named_parameters(), words=model.encoder.words)


def _model_config(manifest: dict) -> ModelConfig:
    values = {}
    for key, kind in _MODEL_KEYS.items():
        text = manifest.get(f"model.{key}")
        if text is None:
            raise CheckpointError(f"manifest lacks model.{key}")
        values[key] = (text == "True") if kind is bool else kind(text)
    return ModelConfig(**values)


def load_model(directory, store: TkgStore) -> tuple:
    """Rebuild a model over ``store`` from a full checkpoint; returns ``(model, manifest)``."""
    manifest, arrays, words = read_checkpoint(directory)
    if manifest.get("kind") != "model" or words is None:
        raise CheckpointError(f"{directory} is not a full-model checkpoint")
    _check_vocab(manifest, store)
    config = _model_config(manifest)
    model = TkgqaModel(store, words, config, np.random.default_rng(0))
    params = model.named_parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"checkpoint arrays do not match the model: {missing[:4]}")
    for name, tensor in params.items():
        if tensor.values.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape}, model expects {tensor.values.shape}")
        tensor.values[...] = arrays[name]
    return model, manifest
