"""Versioned model checkpoints.

Layout: an 8-byte magic, a little-endian u32 header length, a UTF-8 JSON
header (model kind, config, seed, extra metadata, and the tensor directory
in declared order), then the tensors' raw little-endian float32 data
concatenated in that order.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .ckdformer import CKDformer, CKDformerConfig
from .conformer import ConformerBackbone, ConformerConfig, DEFAULT_DTYPE

MAGIC = b"PSKCKPT1"


class CheckpointError(ValueError):
    pass


def _header_and_tensors(model: torch.nn.Module) -> tuple[list[dict], list[np.ndarray]]:
    directory = []
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        directory.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr)
    return directory, blobs


def _write(path: Path, header: dict, blobs: list[np.ndarray]) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(4, "little"))
        fh.write(payload)
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob).tobytes())


def save_backbone(model: ConformerBackbone, path: str | Path, seed: int = 0,
                  extra: dict | None = None) -> None:
    directory, blobs = _header_and_tensors(model)
    header = {
        "kind": "conformer-backbone",
        "config": asdict(model.config),
        "seed": seed,
        "dtype": "float32",
        "tensors": directory,
        "extra": extra or {},
    }
    _write(Path(path), header, blobs)


def save_ckdformer(model: CKDformer, path: str | Path, seed: int = 0,
                   extra: dict | None = None) -> None:
    directory, blobs = _header_and_tensors(model)
    cfg = model.config
    header = {
        "kind": "ckdformer",
        "config": {
            "backbone": asdict(cfg.backbone),
            "students": cfg.students,
            "head_hidden": cfg.head_hidden,
            "output_dim": cfg.output_dim,
            "shared_backbone": cfg.shared_backbone,
        },
        "seed": seed,
        "dtype": "float32",
        "tensors": directory,
        "extra": extra or {},
    }
    _write(Path(path), header, blobs)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header dict plus name -> float32 array in declared order."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file: bad magic {magic!r}")
        header_len = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(f"truncated tensor data for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after declared tensors")
    return header, tensors


def _load_state(model: torch.nn.Module, tensors: dict[str, np.ndarray], dtype) -> None:
    state = {name: torch.as_tensor(arr.copy(), dtype=dtype) for name, arr in tensors.items()}
    model.load_state_dict(state)


def load_ckdformer(path: str | Path, dtype=DEFAULT_DTYPE) -> tuple[CKDformer, dict]:
    header, tensors = read_checkpoint(path)
    if header.get("kind") != "ckdformer":
        raise CheckpointError(f"expected a ckdformer checkpoint, got {header.get('kind')!r}")
    cfg = header["config"]
    config = CKDformerConfig(
        backbone=ConformerConfig(**cfg["backbone"]),
        students=cfg["students"],
        head_hidden=cfg["head_hidden"],
        output_dim=cfg["output_dim"],
        shared_backbone=cfg["shared_backbone"],
    )
    model = CKDformer(config, seed=header.get("seed", 0), dtype=dtype)
    _load_state(model, tensors, dtype)
    return model, header


def load_backbone(path: str | Path, dtype=DEFAULT_DTYPE) -> tuple[ConformerBackbone, dict]:
    header, tensors = read_checkpoint(path)
    if header.get("kind") != "conformer-backbone":
        raise CheckpointError(f"expected a backbone checkpoint, got {header.get('kind')!r}")
    model = ConformerBackbone(ConformerConfig(**header["config"]), seed=header.get("seed", 0),
                              dtype=dtype)
    _load_state(model, tensors, dtype)
    return model, header
