"""Codebook aggregation: rebuild the codebook from k-means centres of the
encoder outputs over the training set, then fine-tune the autoencoder.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from lsgs.datasets import DatasetManifest
from lsgs.errors import ConfigError, DataError
from lsgs.vqvae import VQVAE, TrainLog, codebook_usage, reconstruction_loss, to_tensor, train_vqvae

log = logging.getLogger(__name__)

CORPUS_VERSION = 1


@dataclass
class EncodingCorpus:
    vectors: np.ndarray  # (M, d) float32
    sources: list[tuple[str, int, int]]  # (sample id, cell row, cell col)

    def __len__(self) -> int:
        return len(self.vectors)

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.f32`` (raw little-endian float32) and ``<prefix>.txt``."""
        prefix = Path(prefix)
        data, index = prefix.with_suffix(".f32"), prefix.with_suffix(".txt")
        self.vectors.astype("<f4").tofile(data)
        m, d = self.vectors.shape
        lines = [f"# lsgs-corpus v{CORPUS_VERSION} {m} {d}"]
        lines += [f"{sid}\t{r}\t{c}" for sid, r, c in self.sources]
        index.write_text("\n".join(lines) + "\n")
        return data, index

    @classmethod
    def load(cls, prefix: str | Path) -> EncodingCorpus:
        prefix = Path(prefix)
        lines = prefix.with_suffix(".txt").read_text().splitlines()
        head = lines[0].split()
        if head[:2] != ["#", "lsgs-corpus"] or head[2] != f"v{CORPUS_VERSION}":
            raise DataError(f"{prefix}: unsupported corpus header {lines[0]!r}")
        m, d = int(head[3]), int(head[4])
        vectors = np.fromfile(prefix.with_suffix(".f32"), dtype="<f4").reshape(m, d)
        sources = []
        for line in lines[1 : m + 1]:
            sid, r, c = line.split("\t")
            sources.append((sid, int(r), int(c)))
        return cls(vectors.astype(np.float32), sources)


def extract_encodings(
    model: VQVAE,
    manifest: DatasetManifest,
    subsample_cap: int = 2**20,
    seed: int = 0,
    batch: int = 64,
) -> EncodingCorpus:
    """Collect every encoder output cell of the training set, in manifest order.

    If there are more than ``subsample_cap`` cells, a uniform reservoir
    sample of that size is kept (fixed seed, so the result is reproducible).
    """
    if len(manifest) == 0:
        raise ConfigError("cannot extract encodings from an empty manifest")
    if subsample_cap < 1:
        raise ConfigError("subsample_cap must be >= 1")
    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = []
    sources: list[tuple[str, int, int]] = []
    seen = 0
    model.eval()
    samples = manifest.samples
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        with torch.no_grad():
            z = model.encode(to_tensor(np.stack([s.pixels for s in chunk])))
        z = z.permute(0, 2, 3, 1).numpy()
        n, h, w, d = z.shape
        for s, zi in zip(chunk, z):
            for r in range(h):
                for c in range(w):
                    if seen < subsample_cap:
                        kept.append(zi[r, c])
                        sources.append((s.id, r, c))
                    else:
                        j = int(rng.integers(0, seen + 1))
                        if j < subsample_cap:
                            kept[j] = zi[r, c]
                            sources[j] = (s.id, r, c)
                    seen += 1
    return EncodingCorpus(np.asarray(kept, dtype=np.float32), sources)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(m)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            j = int(rng.integers(m))
        else:
            j = int(rng.choice(m, p=closest / total))
        centers[i] = x[j]
        closest = np.minimum(closest, ((x - centers[i]) ** 2).sum(1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int, tol: float) -> tuple[np.ndarray, float]:
    k = len(centers)
    for _ in range(max_iters):
        labels = _sq_dists(x, centers).argmin(1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for empty in np.flatnonzero(~filled):
            # reseed from the point of the largest cluster farthest from its centre
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(((x[members] - new[big]) ** 2).sum(1))]
            new[empty] = x[far]
            labels[far] = empty
            counts[big] -= 1
            counts[empty] = 1
        shift = float(np.sqrt(((new - centers) ** 2).sum(1)).max())
        centers = new
        if shift < tol:
            break
    labels = _sq_dists(x, centers).argmin(1)
    inertia = float(((x - centers[labels]) ** 2).sum())
    return centers, inertia


def kmeans(
    corpus: EncodingCorpus | np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    restarts: int = 1,
) -> np.ndarray:
    """Euclidean k-means with k-means++ seeding; returns a (k, d) array.

    With ``restarts > 1`` the run with the lowest within-cluster sum of
    squares wins. Empty clusters are reseeded from the farthest member of
    the largest cluster.
    """
    x = np.asarray(corpus.vectors if isinstance(corpus, EncodingCorpus) else corpus, dtype=np.float64)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(x) < k:
        raise ConfigError(f"k={k} exceeds corpus size {len(x)}")
    best, best_inertia = None, np.inf
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers, inertia = _lloyd(x, _kmeans_pp(x, k, rng), max_iters, tol)
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    return best


def aggregate_codebook(model: VQVAE, centers: np.ndarray) -> VQVAE:
    """Return a copy of ``model`` whose codebook rows are exactly ``centers``."""
    centers = np.asarray(centers)
    if centers.ndim != 2 or centers.shape[1] != model.codebook.dim:
        raise ConfigError(
            f"centers of shape {centers.shape} do not match embedding dim {model.codebook.dim}"
        )
    out = copy.deepcopy(model)
    out.codebook.replace(torch.as_tensor(centers, dtype=model.codebook.embeddings.dtype))
    out.arch = type(model.arch)(**{**out.arch.__dict__, "n_codes": len(centers)})
    return out


def finetune(
    model: VQVAE,
    manifest: DatasetManifest,
    steps: int,
    batch_size: int = 32,
    lr: float = 2e-4,
    commitment_weight: float = 1.0,
    seed: int = 0,
    log_interval: int = 100,
    log_fn=None,
) -> tuple[VQVAE, float, list[TrainLog]]:
    """Continue training with the same objective. Returns (model, L_rec, history)."""
    if steps > 0:
        history = train_vqvae(
            model, manifest, steps, batch_size=batch_size, lr=lr, commitment_weight=commitment_weight,
            seed=seed, log_interval=log_interval, log=log_fn,
        )
    else:
        history = []
    return model, reconstruction_loss(model, manifest), history


def choose_k(effective_before: int, config) -> int:
    if config.agg_k > 0:
        return config.agg_k
    return max(1, min(2 * effective_before, config.agg_k_cap))


@dataclass
class AggregationReport:
    k: int
    effective_before: int
    effective_after: int
    l_rec_before: float
    l_rec_after: float

    def lines(self) -> list[str]:
        return [
            f"size_before={self.effective_before}",
            f"size_after={self.effective_after}",
            f"rec_loss_before={self.l_rec_before:.6f}",
            f"rec_loss_after={self.l_rec_after:.6f}",
        ]


def run_aggregation(model: VQVAE, manifest: DatasetManifest, config, log_fn=None) -> tuple[VQVAE, AggregationReport]:
    """Measure, aggregate, fine-tune, measure again."""
    _, eff_before = codebook_usage(model, manifest)
    l_before = reconstruction_loss(model, manifest)
    corpus = extract_encodings(model, manifest, config.agg_subsample_cap, seed=config.seed)
    k = choose_k(eff_before, config)
    centers = kmeans(corpus, k, seed=config.seed, max_iters=config.kmeans_max_iters,
                     tol=config.kmeans_tol, restarts=config.kmeans_restarts)
    new = aggregate_codebook(model, centers)
    new, l_after, _ = finetune(
        new, manifest, config.resolved_finetune_steps, batch_size=config.batch_size, lr=config.finetune_lr,
        commitment_weight=config.commitment_weight, seed=config.seed + 1,
        log_interval=config.log_interval, log_fn=log_fn,
    )
    _, eff_after = codebook_usage(new, manifest)
    return new, AggregationReport(k, eff_before, eff_after, l_before, l_after)
