"""Run configuration: one flat, versioned key-value document per run.

Two profiles ship with the package. ``desk`` is sized for a single CPU and is
what the test-suite runs; ``paper`` carries the full-size constants
(128x128 inputs, 512-dim codes, 1024 codes, 12 layers of width 768).
The desk autoencoder has no residual blocks so each code stays local.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from lsgs.errors import ConfigError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0

    # data
    resolution: tuple[int, int] = (64, 64)
    channels: int = 1

    # autoencoder
    downsample: int = 8
    hidden_channels: int = 64
    n_res_blocks: int = 2
    embed_dim: int = 64
    n_codes: int = 128
    commitment_weight: float = 1.0
    vqvae_lr: float = 2e-4
    batch_size: int = 32
    vqvae_steps: int = 1500
    log_interval: int = 100

    # codebook aggregation
    agg_k: int = 0  # 0 = twice the effective count before aggregation
    agg_k_cap: int = 512
    agg_subsample_cap: int = 2**20
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 1
    finetune_steps: int = -1  # -1 = 10% of vqvae_steps
    finetune_lr: float = 2e-4

    # latent prior
    tamper_rate: float = 0.1
    beta: float = 0.01
    loss_reduction: str = "sum"
    prior_layers: int = 4
    prior_dim: int = 128
    prior_heads: int = 4
    prior_dropout: float = 0.0
    prior_lr: float = 5e-4
    prior_batch_size: int = 32
    prior_epochs: int = 60
    causal: bool = False

    # scoring
    n_restorations: int = 8
    k: float = 1.0
    temperature: float = 1.0
    resample_iters: int = 1
    eps: float = 1e-6
    fg_threshold: float = 0.02
    use_foreground_mask: bool = True
    fuse_before_smooth: bool = True

    # evaluation
    dice_sweep: int = 101

    def validate(self) -> RunConfig:
        def need(ok: bool, msg: str) -> None:
            if not ok:
                raise ConfigError(msg)

        need(self.profile in PROFILES, f"unknown profile {self.profile!r}")
        h, w = self.resolution
        r = self.downsample
        need(r >= 2 and (r & (r - 1)) == 0, f"downsample must be a power of two, got {r}")
        need(h % r == 0 and w % r == 0, f"resolution {self.resolution} not divisible by {r}")
        need(self.channels >= 1, "channels must be >= 1")
        need(self.n_codes >= 1, "n_codes must be >= 1")
        need(self.embed_dim >= 1, "embed_dim must be >= 1")
        need(self.commitment_weight >= 0, "commitment_weight must be >= 0")
        need(self.vqvae_lr > 0 and self.finetune_lr > 0 and self.prior_lr > 0, "learning rates must be > 0")
        need(self.batch_size >= 1 and self.prior_batch_size >= 1, "batch sizes must be >= 1")
        need(self.vqvae_steps >= 0 and self.prior_epochs >= 0, "step counts must be >= 0")
        need(self.agg_k >= 0 and self.agg_k_cap >= 1, "agg_k must be >= 0 and agg_k_cap >= 1")
        need(self.agg_subsample_cap >= 1, "agg_subsample_cap must be >= 1")
        need(self.kmeans_restarts >= 1, "kmeans_restarts must be >= 1")
        need(0.0 <= self.tamper_rate <= 1.0, "tamper_rate must lie in [0, 1]")
        need(0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]")
        need(self.loss_reduction in ("sum", "mean"), "loss_reduction must be 'sum' or 'mean'")
        need(self.prior_dim % self.prior_heads == 0, "prior_dim must be divisible by prior_heads")
        need(self.n_restorations >= 1, "n_restorations must be >= 1")
        need(self.k > 0 and self.eps > 0, "k and eps must be > 0")
        need(self.temperature >= 0, "temperature must be >= 0")
        need(self.resample_iters >= 1, "resample_iters must be >= 1")
        need(self.dice_sweep >= 1, "dice_sweep must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
        return self

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.resolution[0] // self.downsample, self.resolution[1] // self.downsample

    @property
    def resolved_finetune_steps(self) -> int:
        if self.finetune_steps >= 0:
            return self.finetune_steps
        return max(1, round(0.1 * self.vqvae_steps))

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PROFILES: dict[str, dict[str, Any]] = {
    # small-CPU regime tuned on the synthetic family; see README
    "desk": dict(
        hidden_channels=32,
        n_res_blocks=0,
        commitment_weight=0.25,
        vqvae_lr=1e-3,
        vqvae_steps=750,
        finetune_steps=100,
    ),
    "paper": dict(
        resolution=(128, 128),
        hidden_channels=256,
        embed_dim=512,
        n_codes=1024,
        agg_k_cap=4096,
        prior_layers=12,
        prior_dim=768,
        prior_heads=12,
        prior_dropout=0.1,
        vqvae_steps=100_000,
        prior_epochs=200,
    ),
}

_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def make_config(profile: str = "desk", **overrides: Any) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    values = {**PROFILES[profile], **overrides, "profile": profile}
    return config_from_dict(values)


def config_from_dict(values: dict[str, Any]) -> RunConfig:
    unknown = set(values) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    coerced: dict[str, Any] = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    for key, value in values.items():
        coerced[key] = _coerce(key, types[key], value)
    try:
        return RunConfig(**coerced).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(key: str, annotation: str, value: Any) -> Any:
    try:
        if annotation == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if annotation == "int":
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if annotation == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if annotation == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if annotation.startswith("tuple"):
            h, w = value
            return (int(h), int(w))
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"invalid value for {key}: {value!r}")


def load_config(path: str | Path | None = None, profile: str | None = None, **overrides: Any) -> RunConfig:
    """Read a config document, apply the named profile underneath it, then overrides.

    The document must carry ``version: 1``. Keys not in the schema are rejected.
    """
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {p} must be a key-value mapping")
        version = doc.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config {p} has version {version!r}, expected {CONFIG_VERSION}")
    prof = profile or doc.get("profile", "desk")
    if prof not in PROFILES:
        raise ConfigError(f"unknown profile {prof!r}")
    values = {**PROFILES[prof], **doc, **overrides, "profile": prof}
    return config_from_dict(values)


def dump_config(config: RunConfig, path: str | Path) -> None:
    doc = {"version": CONFIG_VERSION, **config.to_dict()}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))
