"""Pixel-wise anomaly scores from prior-guided restorations.

For an input image the autoencoder gives a code grid. ``x_hat`` is decoded
from that grid as-is, and each restoration ``Y_i`` is decoded from a grid
resampled by the prior. The score map is a weighted mean of
``|x_hat - Y_i|`` where restorations far from ``x_hat`` in L1 get less
weight; it is then masked to the foreground and smoothed (3x3 min pool,
then 7x7 mean pool).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

from lsgs.datasets import ImageSample
from lsgs.errors import ConfigError, DataError
from lsgs.prior import PriorModel, resample_tokens
from lsgs.vqvae import VQVAE, to_tensor

SCORE_FORMAT_VERSION = 1


@dataclass
class RestorationSet:
    x_hat: np.ndarray  # (H, W, C)
    restorations: np.ndarray  # (n, H, W, C)
    seeds: list[int]
    grid: np.ndarray  # (h, w) codes of the input
    restored_grids: np.ndarray  # (n, h, w)

    @property
    def n(self) -> int:
        return len(self.restorations)


@dataclass
class AnomalyScoreMap:
    scores: np.ndarray  # (H, W) float32
    provenance: dict[str, Any] = field(default_factory=dict)


def image_seed(base_seed: int, sample_id: str) -> int:
    """Per-image seed that depends only on the run seed and the sample id."""
    return (base_seed * 1_000_003 + zlib.crc32(sample_id.encode())) % (2**31 - 1)


def _pixels(image: ImageSample | np.ndarray) -> np.ndarray:
    pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image, dtype=np.float32)
    return pixels[..., None] if pixels.ndim == 2 else pixels


def build_restorations(
    vqvae: VQVAE,
    prior: PriorModel,
    image: ImageSample | np.ndarray,
    n: int = 8,
    temperature: float = 1.0,
    seed: int = 0,
    iters: int = 1,
) -> RestorationSet:
    """Encode once, then decode the original grid and ``n`` prior resamples (seeds seed+1..seed+n)."""
    if n < 1:
        raise ConfigError("need at least one restoration")
    if prior.n_codes != vqvae.codebook.n_codes:
        raise ConfigError(
            f"prior has {prior.n_codes} codes but the autoencoder codebook has {vqvae.codebook.n_codes}"
        )
    vqvae.eval()
    with torch.no_grad():
        idx, _ = vqvae.quantize(vqvae.encode(to_tensor(_pixels(image))), count=False)
        grid = idx[0]
        seeds = [seed + i for i in range(1, n + 1)]
        resampled = resample_tokens(prior, grid.reshape(-1).numpy(), temperature, seeds, iters)
        grids = torch.as_tensor(resampled).reshape(n, *grid.shape)
        x_hat = vqvae.decode_indices(grid[None])[0].permute(1, 2, 0).numpy()
        ys = vqvae.decode_indices(grids).permute(0, 2, 3, 1).numpy()
    return RestorationSet(x_hat, ys, seeds, grid.numpy(), grids.numpy())


def restoration_weights(rset: RestorationSet, k: float = 1.0, eps: float = 1e-6) -> np.ndarray:
    """softmax_i(k / (sum|x_hat - Y_i| + eps))."""
    if rset.n == 0:
        raise DataError("empty restoration set")
    if k <= 0 or eps <= 0:
        raise ConfigError("k and eps must be positive")
    diffs = np.abs(rset.restorations.astype(np.float64) - rset.x_hat.astype(np.float64))
    l1 = diffs.reshape(rset.n, -1).sum(1)
    logits = k / (l1 + eps)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def anomaly_score(rset: RestorationSet, k: float = 1.0, eps: float = 1e-6) -> AnomalyScoreMap:
    """Weighted sum of per-restoration difference maps (channels averaged)."""
    w = restoration_weights(rset, k, eps)
    diffs = np.abs(rset.restorations.astype(np.float64) - rset.x_hat.astype(np.float64)).mean(-1)
    scores = np.tensordot(w, diffs, axes=1)
    return AnomalyScoreMap(scores.astype(np.float32), {"n": rset.n, "k": k, "weights": w.tolist()})


def foreground_mask(image: ImageSample | np.ndarray, threshold: float = 0.02) -> np.ndarray:
    """Threshold the per-pixel max channel, then close with a 3x3 square."""
    pixels = _pixels(image)
    fg = pixels.max(-1) > threshold
    # pad so the closing does not erode pixels along the image border
    padded = np.pad(fg, 2, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), dtype=bool))
    return closed[2:-2, 2:-2].astype(np.uint8)


def min_pool(scores: np.ndarray, size: int = 3) -> np.ndarray:
    return ndimage.minimum_filter(scores, size=size, mode="nearest")


def mean_pool(scores: np.ndarray, size: int = 7) -> np.ndarray:
    # float64 accumulation of float32 inputs is exact, so the result does not
    # depend on summation order
    r = size // 2
    padded = np.pad(scores.astype(np.float64), r, mode="edge")
    windows = sliding_window_view(padded, (size, size))
    return (windows.sum(axis=(-2, -1)) / (size * size)).astype(scores.dtype)


def smooth(scores: AnomalyScoreMap | np.ndarray) -> AnomalyScoreMap | np.ndarray:
    """Stride-1, same-shape 3x3 min pool then 7x7 mean pool, edge-replicate padding."""
    if isinstance(scores, AnomalyScoreMap):
        return AnomalyScoreMap(smooth(scores.scores), dict(scores.provenance))
    a = np.asarray(scores)
    if a.dtype != np.float64:
        a = a.astype(np.float32)
    return mean_pool(min_pool(a, 3), 7)


def postprocess(raw: np.ndarray, image: ImageSample | np.ndarray, config) -> np.ndarray:
    """Foreground fusion (multiplication) and smoothing, in the configured order."""
    raw = raw.astype(np.float32)
    mask = foreground_mask(image, config.fg_threshold) if config.use_foreground_mask else None
    if mask is None:
        return smooth(raw)
    if config.fuse_before_smooth:
        return smooth(raw * mask)
    return smooth(raw) * mask


def score_image(
    vqvae: VQVAE,
    prior: PriorModel,
    image: ImageSample,
    config,
    provenance: dict[str, Any] | None = None,
) -> AnomalyScoreMap:
    """Full pipeline for one image; deterministic given models, config and image id."""
    seed = image_seed(config.seed, image.id)
    rset = build_restorations(vqvae, prior, image, config.n_restorations, config.temperature, seed,
                              config.resample_iters)
    raw = anomaly_score(rset, config.k, config.eps)
    scores = postprocess(raw.scores, image, config)
    prov = {
        "id": image.id,
        "n": config.n_restorations,
        "k": config.k,
        "temperature": config.temperature,
        "seed": seed,
        **(provenance or {}),
    }
    return AnomalyScoreMap(np.ascontiguousarray(scores, dtype=np.float32), prov)


def score_image_reconstruction(vqvae: VQVAE, image: ImageSample, config) -> AnomalyScoreMap:
    """Autoencoder-only baseline: |x - x_hat| with the same masking and smoothing."""
    vqvae.eval()
    with torch.no_grad():
        x_hat = vqvae(to_tensor(image.pixels), count=False)["x_hat"][0].permute(1, 2, 0).numpy()
    raw = np.abs(image.pixels.astype(np.float64) - x_hat).mean(-1)
    scores = postprocess(raw, image, config)
    return AnomalyScoreMap(np.ascontiguousarray(scores, dtype=np.float32), {"id": image.id, "variant": "vqvae-only"})


def save_score_map(smap: AnomalyScoreMap, out_dir: str | Path, sample_id: str) -> list[Path]:
    """Write ``<id>.npy`` (float32), ``<id>.png`` (8-bit preview) and ``<id>.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    npy, png, meta = (out_dir / f"{sample_id}{ext}" for ext in (".npy", ".png", ".json"))
    np.save(npy, smap.scores.astype(np.float32))
    peak = float(smap.scores.max()) if smap.scores.size else 0.0
    preview = smap.scores / peak if peak > 0 else np.zeros_like(smap.scores)
    Image.fromarray(np.round(np.clip(preview, 0, 1) * 255).astype(np.uint8)).save(png)
    record = {"format_version": SCORE_FORMAT_VERSION, **smap.provenance}
    meta.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    return [npy, png, meta]


def load_score_map(out_dir: str | Path, sample_id: str) -> np.ndarray:
    path = Path(out_dir) / f"{sample_id}.npy"
    if not path.is_file():
        raise DataError(f"missing score map for {sample_id}")
    return np.load(path)
