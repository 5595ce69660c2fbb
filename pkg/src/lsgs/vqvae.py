"""Convolutional VQ-VAE with a minimum-distance quantizer.

The encoder downsamples by ``r`` with ``log2(r)`` stride-2 convolutions; the
decoder mirrors it with transposed convolutions. Normalisation is GroupNorm
only, so a sample's output never depends on what else is in the batch.

Gradients pass through the quantizer with the straight-through estimator:
the decoder input is ``z_e + (e - z_e).detach()``, which equals ``e`` in the
forward pass and has the identity Jacobian with respect to ``z_e``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from lsgs.datasets import DatasetManifest, ImageSample, check_divisible
from lsgs.errors import ConfigError, DataError, ShapeError, TrainingError

# Entries in one (cells x codes) distance block; bounds peak memory.
_DIST_BLOCK = 1 << 22


@dataclass(frozen=True)
class VqvaeArch:
    in_channels: int = 1
    hidden_channels: int = 64
    n_res_blocks: int = 2
    embed_dim: int = 64
    n_codes: int = 128
    downsample: int = 8

    @classmethod
    def from_config(cls, config) -> VqvaeArch:
        return cls(
            in_channels=config.channels,
            hidden_channels=config.hidden_channels,
            n_res_blocks=config.n_res_blocks,
            embed_dim=config.embed_dim,
            n_codes=config.n_codes,
            downsample=config.downsample,
        )


def nearest_code(embeddings: Tensor, z: Tensor) -> Tensor:
    """Index of the closest row of ``embeddings`` for every row of ``z``.

    Distances come from explicit differences (not the ``|a|^2 - 2ab + |b|^2``
    expansion), so equal rows give bit-identical distances and ``argmin``
    resolves ties to the smallest index.
    """
    n, d = embeddings.shape
    z = z.reshape(-1, d)
    if z.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long, device=z.device)
    chunk = max(1, _DIST_BLOCK // max(1, n))
    out = []
    for start in range(0, z.shape[0], chunk):
        dist = torch.cdist(z[start : start + chunk], embeddings, compute_mode="donot_use_mm_for_euclid_dist")
        out.append(dist.argmin(dim=1))
    return torch.cat(out)


class Codebook(nn.Module):
    """Embedding rows plus per-row usage counters."""

    def __init__(self, n_codes: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if n_codes < 1:
            raise ConfigError("codebook needs at least one row")
        bound = 1.0 / n_codes
        init = torch.empty(n_codes, dim).uniform_(-bound, bound, generator=generator)
        self.embeddings = nn.Parameter(init)
        self.register_buffer("usage_counts", torch.zeros(n_codes, dtype=torch.long))

    @property
    def n_codes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def reset_usage(self) -> None:
        self.usage_counts.zero_()

    def lookup(self, indices: Tensor) -> Tensor:
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.n_codes):
            raise DataError(f"code index out of range [0, {self.n_codes})")
        return F.embedding(indices, self.embeddings)

    def quantize(self, z: Tensor, count: bool = True) -> tuple[Tensor, Tensor]:
        """Map vectors (..., d) to (indices (...), rows (..., d))."""
        with torch.no_grad():
            idx = nearest_code(self.embeddings.detach(), z.detach()).reshape(z.shape[:-1])
            if count:
                self.usage_counts += torch.bincount(idx.reshape(-1), minlength=self.n_codes)
        return idx, F.embedding(idx, self.embeddings)

    def replace(self, centers: Tensor) -> None:
        """Swap in new rows; the row count may change. Counters reset."""
        if centers.ndim != 2 or centers.shape[1] != self.dim:
            raise ConfigError(f"centers must be K x {self.dim}, got {tuple(centers.shape)}")
        if not torch.isfinite(centers).all():
            raise ConfigError("centers contain non-finite values")
        self.embeddings = nn.Parameter(centers.detach().clone().to(self.embeddings.dtype))
        self.usage_counts = torch.zeros(centers.shape[0], dtype=torch.long)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(_groups(channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(_groups(channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.block(x)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class VQVAE(nn.Module):
    def __init__(self, arch: VqvaeArch, seed: int = 0):
        super().__init__()
        self.arch = arch
        r = arch.downsample
        if r < 2 or r & (r - 1):
            raise ConfigError(f"downsample must be a power of two, got {r}")
        n_down = int(math.log2(r))
        h = arch.hidden_channels
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            enc: list[nn.Module] = [nn.Conv2d(arch.in_channels, h, 4, stride=2, padding=1)]
            for _ in range(n_down - 1):
                enc += [nn.SiLU(), nn.Conv2d(h, h, 4, stride=2, padding=1)]
            enc += [ResBlock(h) for _ in range(arch.n_res_blocks)]
            enc += [nn.GroupNorm(_groups(h), h), nn.SiLU(), nn.Conv2d(h, arch.embed_dim, 1)]
            self.encoder = nn.Sequential(*enc)

            dec: list[nn.Module] = [nn.Conv2d(arch.embed_dim, h, 3, padding=1)]
            dec += [ResBlock(h) for _ in range(arch.n_res_blocks)]
            for _ in range(n_down - 1):
                dec += [nn.GroupNorm(_groups(h), h), nn.SiLU(), nn.ConvTranspose2d(h, h, 4, stride=2, padding=1)]
            dec += [nn.GroupNorm(_groups(h), h), nn.SiLU(), nn.ConvTranspose2d(h, arch.in_channels, 4, stride=2, padding=1)]
            self.decoder = nn.Sequential(*dec)
        self.codebook = Codebook(arch.n_codes, arch.embed_dim, generator=g)

    @property
    def downsample(self) -> int:
        return self.arch.downsample

    def encode(self, x: Tensor) -> Tensor:
        """(N, C, H, W) -> (N, d, H/r, W/r)."""
        if x.shape[-2] % self.downsample or x.shape[-1] % self.downsample:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by {self.downsample}")
        return self.encoder(x)

    def decode(self, z_q: Tensor) -> Tensor:
        return torch.sigmoid(self.decoder(z_q))

    def quantize(self, z_e: Tensor, count: bool = True) -> tuple[Tensor, Tensor]:
        """(N, d, h, w) -> indices (N, h, w), rows (N, d, h, w)."""
        idx, rows = self.codebook.quantize(z_e.permute(0, 2, 3, 1), count=count)
        return idx, rows.permute(0, 3, 1, 2)

    def decode_indices(self, indices: Tensor) -> Tensor:
        return self.decode(self.codebook.lookup(indices).permute(0, 3, 1, 2))

    def forward(self, x: Tensor, count: bool = True) -> dict[str, Tensor]:
        z_e = self.encode(x)
        idx, e = self.quantize(z_e, count=count)
        z_q = z_e + (e - z_e).detach()
        return {"x_hat": self.decode(z_q), "z_e": z_e, "e": e, "z_q": z_q, "indices": idx}


def build_vqvae(config, seed: int | None = None) -> VQVAE:
    return VQVAE(VqvaeArch.from_config(config), seed=config.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# numpy-facing helpers (one image at a time)


def to_tensor(pixels: np.ndarray) -> Tensor:
    """(H, W, C) or (N, H, W, C) array -> (N, C, H, W) float tensor."""
    a = np.asarray(pixels, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def encode(model: VQVAE, image: ImageSample | np.ndarray) -> np.ndarray:
    """Continuous encoder output of one image as an (h, w, d) array."""
    pixels = image.pixels if isinstance(image, ImageSample) else image
    check_divisible(pixels.shape, model.downsample)
    model.eval()
    with torch.no_grad():
        z = model.encode(to_tensor(pixels))
    return z[0].permute(1, 2, 0).numpy()


def quantize(codebook: Codebook, z_e) -> tuple[int, np.ndarray]:
    """Nearest codebook row to one d-vector; ties go to the smaller index."""
    z = torch.as_tensor(np.asarray(z_e), dtype=codebook.embeddings.dtype).reshape(1, -1)
    if z.shape[1] != codebook.dim:
        raise ShapeError(f"vector length {z.shape[1]} != codebook dim {codebook.dim}")
    if not torch.isfinite(z).all():
        raise DataError("cannot quantize a non-finite vector")
    idx, row = codebook.quantize(z)
    return int(idx[0]), row[0].detach().numpy()


def quantize_map(codebook: Codebook, z_map: np.ndarray, count: bool = True) -> np.ndarray:
    """Quantize every cell of an (h, w, d) map; returns an (h, w) int64 grid."""
    z = torch.as_tensor(np.asarray(z_map), dtype=codebook.embeddings.dtype)
    idx, _ = codebook.quantize(z, count=count)
    return idx.numpy().astype(np.int64)


def decode(model: VQVAE, grid: np.ndarray) -> np.ndarray:
    """Decode an (h, w) code grid to an (H, W, C) image."""
    idx = torch.as_tensor(np.asarray(grid), dtype=torch.long)
    if idx.ndim == 2:
        idx = idx[None]
    model.eval()
    with torch.no_grad():
        x = model.decode_indices(idx)
    return x[0].permute(1, 2, 0).numpy()


def image_codes(model: VQVAE, pixels: np.ndarray, count: bool = False, batch: int = 64) -> np.ndarray:
    """Code grids for an (N, H, W, C) stack, as an (N, h, w) int64 array."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch):
            x = to_tensor(pixels[start : start + batch])
            idx, _ = model.quantize(model.encode(x), count=count)
            out.append(idx.numpy())
    return np.concatenate(out).astype(np.int64)


def reconstruct(model: VQVAE, pixels: np.ndarray, batch: int = 64) -> np.ndarray:
    """Encode-quantize-decode an (N, H, W, C) stack."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(pixels), batch):
            res = model(to_tensor(pixels[start : start + batch]), count=False)
            out.append(res["x_hat"].permute(0, 2, 3, 1).numpy())
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# objective and training


def vq_losses(x: Tensor, x_hat: Tensor, z_e: Tensor, e: Tensor, commitment_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Mean-L1 reconstruction loss and the two-term VQ loss.

    ``z_e`` and ``e`` are (N, d, h, w). The codebook term sees the encoder
    output through a stop-gradient and the commitment term sees the code
    rows through one, so each term moves only its own side.
    """
    l_rec = (x - x_hat).abs().mean()
    codebook_term = (z_e.detach() - e).pow(2).sum(dim=1).mean()
    commitment = (e.detach() - z_e).pow(2).sum(dim=1).mean()
    return l_rec, codebook_term + commitment_weight * commitment


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def train_step(
    model: VQVAE,
    batch: Tensor,
    optimizer: torch.optim.Optimizer,
    commitment_weight: float = 1.0,
    step: int = 0,
) -> tuple[float, float]:
    model.train()
    out = model(batch)
    l_rec, l_vq = vq_losses(batch, out["x_hat"], out["z_e"], out["e"], commitment_weight)
    loss = l_rec + l_vq
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return l_rec.item(), l_vq.item()


@dataclass
class TrainLog:
    step: int
    l_rec: float
    l_vq: float

    def line(self, stage: str = "vqvae") -> str:
        return f"stage={stage} step={self.step} l_rec={self.l_rec:.6f} l_vq={self.l_vq:.6f}"


def train_vqvae(
    model: VQVAE,
    manifest: DatasetManifest | np.ndarray,
    steps: int,
    batch_size: int = 32,
    lr: float = 2e-4,
    commitment_weight: float = 1.0,
    seed: int = 0,
    log_interval: int = 100,
    log: Callable[[TrainLog], None] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[TrainLog]:
    """Minimise reconstruction + VQ loss with minibatches drawn with replacement."""
    pixels = manifest.pixels() if isinstance(manifest, DatasetManifest) else manifest
    if steps and len(pixels) == 0:
        raise ConfigError("cannot train on an empty dataset")
    data = to_tensor(pixels)
    if optimizer is None:
        optimizer = make_optimizer(model, lr)
    g = torch.Generator().manual_seed(seed)
    history = []
    for step in range(1, steps + 1):
        idx = torch.randint(len(data), (min(batch_size, len(data)),), generator=g)
        l_rec, l_vq = train_step(model, data[idx], optimizer, commitment_weight, step)
        if step % log_interval == 0 or step == steps:
            rec = TrainLog(step, l_rec, l_vq)
            history.append(rec)
            if log is not None:
                log(rec)
    model.eval()
    return history


def reconstruction_loss(model: VQVAE, manifest: DatasetManifest | np.ndarray) -> float:
    """Mean absolute error of encode-quantize-decode over a whole dataset."""
    pixels = manifest.pixels() if isinstance(manifest, DatasetManifest) else manifest
    return float(np.abs(reconstruct(model, pixels) - pixels).mean())


def codebook_usage(model: VQVAE, manifest: DatasetManifest | np.ndarray) -> tuple[np.ndarray, int]:
    """Reset counters, quantize every image once, return (histogram, rows used)."""
    pixels = manifest.pixels() if isinstance(manifest, DatasetManifest) else manifest
    model.codebook.reset_usage()
    image_codes(model, pixels, count=True)
    hist = model.codebook.usage_counts.numpy().copy()
    return hist, int((hist > 0).sum())
