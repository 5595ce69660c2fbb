"""Transformer prior over code sequences, trained by tamper-and-restore.

A fraction of each training sequence is overwritten with uniformly random
code indices and the model learns to predict the original token at every
position. Attention is unmasked by default, so every position conditions on
the whole grid; ``causal=True`` builds the left-to-right comparator used in
ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from lsgs.datasets import DatasetManifest
from lsgs.errors import ConfigError, DataError, TrainingError
from lsgs.vqvae import VQVAE, image_codes


@dataclass
class CodeSequence:
    tokens: np.ndarray  # (L,) int64
    grid_shape: tuple[int, int]

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        h, w = self.grid_shape
        if h * w != self.tokens.size:
            raise DataError(f"{self.tokens.size} tokens do not fill a {h}x{w} grid")

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> CodeSequence:
        grid = np.asarray(grid)
        return cls(grid.reshape(-1), tuple(grid.shape))

    def to_grid(self) -> np.ndarray:
        return self.tokens.reshape(self.grid_shape)

    def __len__(self) -> int:
        return self.tokens.size


@dataclass
class TamperRecord:
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    original_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    replacement_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def mask(self, length: int) -> np.ndarray:
        m = np.zeros(length, dtype=bool)
        m[self.positions] = True
        return m


def tamper_count(length: int, rate: float) -> int:
    """round-half-up(rate * length), at least 1 whenever rate > 0."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"tamper rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return 0
    return min(length, max(1, math.floor(rate * length + 0.5)))


def tamper(sequence: CodeSequence, rate: float, n_codes: int, seed: int) -> tuple[CodeSequence, TamperRecord]:
    """Overwrite ``tamper_count`` distinct positions with uniform random codes.

    A replacement may coincide with the original token.
    """
    count = tamper_count(len(sequence), rate)
    if count == 0:
        return CodeSequence(sequence.tokens.copy(), sequence.grid_shape), TamperRecord()
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(len(sequence), size=count, replace=False))
    replacements = rng.integers(0, n_codes, size=count)
    tokens = sequence.tokens.copy()
    original = tokens[positions].copy()
    tokens[positions] = replacements
    return CodeSequence(tokens, sequence.grid_shape), TamperRecord(positions, original, replacements)


def tamper_batch(tokens: np.ndarray, rate: float, n_codes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent per-sequence tampering of an (N, L) array. Returns (tampered, mask)."""
    n, length = tokens.shape
    count = tamper_count(length, rate)
    mask = np.zeros((n, length), dtype=bool)
    if count:
        order = np.argsort(rng.random((n, length)), axis=1)[:, :count]
        np.put_along_axis(mask, order, True, axis=1)
    out = tokens.copy()
    out[mask] = rng.integers(0, n_codes, size=int(mask.sum()))
    return out, mask


class PriorModel(nn.Module):
    def __init__(
        self,
        n_codes: int,
        length: int,
        dim: int = 128,
        layers: int = 4,
        heads: int = 4,
        dropout: float = 0.0,
        causal: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        self.n_codes, self.length, self.causal = n_codes, length, causal
        self.hparams = dict(n_codes=n_codes, length=length, dim=dim, layers=layers, heads=heads,
                            dropout=dropout, causal=causal)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.tok_emb = nn.Embedding(n_codes, dim)
            self.pos_emb = nn.Parameter(torch.randn(length, dim) * 0.02)
            layer = nn.TransformerEncoderLayer(
                dim, heads, 4 * dim, dropout=dropout, activation="gelu", batch_first=True, norm_first=True
            )
            self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
            self.norm = nn.LayerNorm(dim)
            self.head = nn.Linear(dim, n_codes)
        if causal:
            self.register_buffer("attn_mask", nn.Transformer.generate_square_subsequent_mask(length), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, tokens: Tensor) -> Tensor:
        """(N, L) int -> (N, L, n_codes) logits."""
        if tokens.shape[-1] != self.length:
            raise DataError(f"sequence length {tokens.shape[-1]} != model length {self.length}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.n_codes):
            raise DataError(f"token out of range [0, {self.n_codes})")
        h = self.tok_emb(tokens) + self.pos_emb
        h = self.blocks(h, mask=self.attn_mask, is_causal=self.causal)
        return self.head(self.norm(h))


def build_prior(config, n_codes: int, seed: int | None = None, causal: bool | None = None) -> PriorModel:
    gh, gw = config.grid_shape
    return PriorModel(
        n_codes, gh * gw, dim=config.prior_dim, layers=config.prior_layers, heads=config.prior_heads,
        dropout=config.prior_dropout, causal=config.causal if causal is None else causal,
        seed=config.seed if seed is None else seed,
    )


def conditional_logits(model: PriorModel, sequence: CodeSequence) -> np.ndarray:
    """Unnormalised log-probabilities, one (n_codes,) row per position."""
    model.eval()
    with torch.no_grad():
        logits = model(torch.as_tensor(sequence.tokens)[None])
    return logits[0].numpy()


def cross_entropy_rows(logits: Tensor, target: Tensor) -> Tensor:
    """Per-position cross-entropy, shape (N, L)."""
    return F.cross_entropy(logits.transpose(1, 2), target, reduction="none")


def focal_loss(
    logits: Tensor,
    target: Tensor | CodeSequence,
    tampered: Tensor | np.ndarray | TamperRecord,
    beta: float = 0.01,
    reduction: str = "sum",
) -> Tensor:
    """(1 - beta) * sum of CE over tampered positions + beta * sum over the rest.

    ``logits`` come from the tampered input; ``target`` is the original
    sequence. Batched inputs are (N, L, K) / (N, L); the per-sequence losses
    are averaged over the batch. ``reduction="mean"`` divides each sequence's
    loss by its length.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    if isinstance(target, CodeSequence):
        target = torch.as_tensor(target.tokens)
    if logits.ndim == 2:
        logits, target = logits[None], target[None]
    length = logits.shape[1]
    if isinstance(tampered, TamperRecord):
        tampered = tampered.mask(length)
    mask = torch.as_tensor(np.asarray(tampered) if not isinstance(tampered, Tensor) else tampered, dtype=torch.bool)
    mask = mask.reshape(target.shape)
    ce = cross_entropy_rows(logits, target.long())
    zero = torch.zeros((), dtype=ce.dtype)
    per_seq = (1.0 - beta) * torch.where(mask, ce, zero).sum(1) + beta * torch.where(mask, zero, ce).sum(1)
    if reduction == "mean":
        per_seq = per_seq / length
    return per_seq.mean()


@dataclass
class PriorLog:
    epoch: int
    loss: float

    def line(self, stage: str = "prior") -> str:
        return f"stage={stage} epoch={self.epoch} loss={self.loss:.6f}"


def sequences_for(vqvae: VQVAE, manifest: DatasetManifest | np.ndarray) -> np.ndarray:
    """Flattened code sequences (N, L) of every image; never touches usage counters."""
    pixels = manifest.pixels() if isinstance(manifest, DatasetManifest) else manifest
    codes = image_codes(vqvae, pixels, count=False)
    return codes.reshape(len(codes), -1)


def train_prior(
    model: PriorModel,
    data: DatasetManifest | np.ndarray,
    vqvae: VQVAE | None = None,
    epochs: int = 60,
    rate: float = 0.1,
    beta: float = 0.01,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 5e-4,
    reduction: str = "sum",
    log: Callable[[PriorLog], None] | None = None,
) -> list[PriorLog]:
    """Fit the prior on normal sequences with freshly tampered copies each step.

    ``data`` is either a manifest (encoded with the frozen ``vqvae``) or an
    (N, L) array of code sequences. Returns one record per epoch, plus an
    epoch-0 record holding the loss before any update.
    """
    if isinstance(data, DatasetManifest):
        if vqvae is None:
            raise ConfigError("a vqvae is required to encode a manifest")
        seqs = sequences_for(vqvae, data)
    else:
        seqs = np.asarray(data, dtype=np.int64)
    if seqs.ndim != 2 or len(seqs) == 0:
        raise ConfigError("need a non-empty (N, L) array of sequences")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    target_all = torch.as_tensor(seqs)

    def batch_loss(idx: np.ndarray) -> Tensor:
        tampered, mask = tamper_batch(seqs[idx], rate, model.n_codes, rng)
        logits = model(torch.as_tensor(tampered))
        return focal_loss(logits, target_all[idx], torch.as_tensor(mask), beta, reduction)

    history = []
    model.eval()
    with torch.no_grad():
        history.append(PriorLog(0, float(batch_loss(np.arange(min(len(seqs), 256))))))
    if log is not None:
        log(history[-1])
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(seqs))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            loss = batch_loss(order[start : start + batch_size])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite prior loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            total += loss.item()
            batches += 1
        history.append(PriorLog(epoch, total / batches))
        if log is not None:
            log(history[-1])
    model.eval()
    return history


def _sample(logits: Tensor, temperature: float, generator: torch.Generator) -> Tensor:
    if temperature == 0:
        return logits.argmax(-1)
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])


def resample_tokens(model: PriorModel, tokens: np.ndarray, temperature: float, seeds: list[int], iters: int = 1) -> np.ndarray:
    """Resample one (L,) sequence once per seed; returns (len(seeds), L)."""
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    model.eval()
    out = []
    with torch.no_grad():
        base = torch.as_tensor(np.asarray(tokens, dtype=np.int64))[None]
        base_logits = model(base)[0]
        for s in seeds:
            g = torch.Generator().manual_seed(int(s))
            cur = _sample(base_logits, temperature, g)
            for _ in range(iters - 1):
                cur = _sample(model(cur[None])[0], temperature, g)
            out.append(cur.numpy())
    return np.stack(out).astype(np.int64)


def resample_sequence(model: PriorModel, sequence: CodeSequence, temperature: float = 1.0, seed: int = 0, iters: int = 1) -> CodeSequence:
    """Draw every position independently from its conditional; temperature 0 is argmax."""
    tokens = resample_tokens(model, sequence.tokens, temperature, [seed], iters)[0]
    return CodeSequence(tokens, sequence.grid_shape)


def restoration_accuracy(model: PriorModel, seqs: np.ndarray, rate: float = 0.1, seed: int = 0) -> float:
    """Fraction of tampered positions whose argmax prediction is the original token."""
    rng = np.random.default_rng(seed)
    tampered, mask = tamper_batch(np.asarray(seqs, dtype=np.int64), rate, model.n_codes, rng)
    model.eval()
    with torch.no_grad():
        pred = model(torch.as_tensor(tampered)).argmax(-1).numpy()
    return float((pred[mask] == seqs[mask]).mean())
