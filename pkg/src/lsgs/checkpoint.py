"""Versioned checkpoint container for both models.

A checkpoint is a ``torch.save`` dict holding the run config, the
architecture, every parameter/buffer tensor and a content hash. Loading
rejects unknown versions and configs whose key set differs from the current
schema.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch

from lsgs.config import RunConfig, config_from_dict
from lsgs.errors import ConfigError, DataError
from lsgs.prior import PriorModel
from lsgs.vqvae import VQVAE, VqvaeArch

FORMAT = "lsgs-checkpoint"
VERSION = 1

# mutable inference state, excluded from model identity
_UNHASHED = {"codebook.usage_counts"}


def model_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    arch = model.arch.__dict__ if isinstance(model, VQVAE) else model.hparams
    h.update(json.dumps(arch, sort_keys=True).encode())
    for name, tensor in sorted(model.state_dict().items()):
        if name in _UNHASHED:
            continue
        t = tensor.detach().contiguous().cpu()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _payload(kind: str, model, config: RunConfig, meta: dict[str, Any]) -> dict[str, Any]:
    arch = dict(model.arch.__dict__) if kind == "vqvae" else dict(model.hparams)
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "arch": arch,
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "model_hash": model_hash(model),
        "meta": meta,
    }


def _write(payload: dict[str, Any], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def save_vqvae(path: str | Path, model: VQVAE, config: RunConfig, **meta: Any) -> str:
    payload = _payload("vqvae", model, config, meta)
    _write(payload, path)
    return payload["model_hash"]


def save_prior(path: str | Path, model: PriorModel, config: RunConfig, vqvae_hash: str, **meta: Any) -> str:
    payload = _payload("prior", model, config, {"vqvae_hash": vqvae_hash, **meta})
    _write(payload, path)
    return payload["model_hash"]


def _read(path: str | Path, kind: str) -> tuple[dict[str, Any], RunConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - any unpickling failure is a data problem
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise DataError(f"{path} is not an lsgs checkpoint")
    if payload.get("version") != VERSION:
        raise ConfigError(f"{path}: checkpoint version {payload.get('version')} != {VERSION}")
    if payload.get("kind") != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    config = config_from_dict(payload["config"])
    if config.digest() != payload["config_digest"]:
        raise DataError(f"{path}: config digest mismatch")
    return payload, config


def load_vqvae(path: str | Path) -> tuple[VQVAE, RunConfig, dict[str, Any]]:
    payload, config = _read(path, "vqvae")
    model = VQVAE(VqvaeArch(**payload["arch"]))
    state = payload["state"]
    model.codebook.replace(state["codebook.embeddings"])
    model.load_state_dict(state, strict=True)
    model.eval()
    if model_hash(model) != payload["model_hash"]:
        raise DataError(f"{path}: parameter hash mismatch")
    return model, config, {"model_hash": payload["model_hash"], **payload["meta"]}


def load_prior(path: str | Path) -> tuple[PriorModel, RunConfig, dict[str, Any]]:
    payload, config = _read(path, "prior")
    model = PriorModel(**payload["arch"])
    model.load_state_dict(payload["state"], strict=True)
    model.eval()
    if model_hash(model) != payload["model_hash"]:
        raise DataError(f"{path}: parameter hash mismatch")
    return model, config, {"model_hash": payload["model_hash"], **payload["meta"]}
