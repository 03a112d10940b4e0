"""Flat binary parameter checkpoints.

Layout: magic "ANCK", u32 version, u32 parameter count, then per parameter
u32 name length, utf-8 name, u32 rank, u32 dims, little-endian f64 payload.
A JSON sidecar (written next to the binary) carries the model config and
vocabulary needed to rebuild the model at load time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .corpus import RESERVED_TOKENS, Vocab
from .encoders import ModelConfig
from .errors import ValidationError
from .model import ImpressionModel

MAGIC = b"ANCK"
VERSION = 1


def sidecar_path(path) -> str:
    return f"{path}.meta.json"


def save_checkpoint(path, model: ImpressionModel, vocab: Vocab, extra: dict | None = None):
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            dims = tensor.data.shape
            fh.write(struct.pack("<I", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    meta = {
        "model": asdict(model.config),
        "vocab": list(vocab.id_to_token[len(RESERVED_TOKENS) :]),
    }
    if extra:
        meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def read_parameters(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValidationError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if dims else 1
            payload = np.frombuffer(fh.read(8 * n), dtype="<f8")
            out[name] = payload.reshape(dims).astype(np.float64)
        return out


def load_checkpoint(path) -> tuple[ImpressionModel, Vocab, dict]:
    """Rebuild model + vocab from a checkpoint and its sidecar."""
    with open(sidecar_path(path), encoding="utf-8") as fh:
        meta = json.load(fh)
    vocab = Vocab(meta["vocab"])
    config = ModelConfig(**meta["model"])
    model = ImpressionModel(config, seed=0)
    stored = read_parameters(path)
    params = model.named_parameters()
    missing = set(params) - set(stored)
    surplus = set(stored) - set(params)
    if missing or surplus:
        raise ValidationError(
            f"{path}: parameter names do not match model (missing {sorted(missing)[:3]}, "
            f"surplus {sorted(surplus)[:3]})"
        )
    for name, tensor in params.items():
        if stored[name].shape != tensor.data.shape:
            raise ValidationError(f"{path}: shape mismatch for {name}")
        tensor.data = stored[name].copy()
    return model, vocab, meta
