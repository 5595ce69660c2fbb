"""End-to-end stages and the ablation harness.

Every stage is a pure function of (config, inputs); the CLI and the
acceptance tests call the same functions.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from lsgs.aggregation import AggregationReport, run_aggregation
from lsgs.config import RunConfig
from lsgs.datasets import DatasetManifest
from lsgs.metrics import REPORT_VERSION, EvaluationReport, evaluate
from lsgs.prior import PriorLog, PriorModel, build_prior, sequences_for, train_prior
from lsgs.scoring import AnomalyScoreMap, score_image, score_image_reconstruction
from lsgs.vqvae import VQVAE, TrainLog, build_vqvae, train_vqvae

log = logging.getLogger(__name__)

LogFn = Callable[[str], None]


def _emit(log_fn: LogFn | None, line: str) -> None:
    if log_fn is not None:
        log_fn(line)
    log.debug(line)


def fit_vqvae(config: RunConfig, train: DatasetManifest, log_fn: LogFn | None = None) -> tuple[VQVAE, list[TrainLog]]:
    torch.manual_seed(config.seed)
    model = build_vqvae(config)
    history = train_vqvae(
        model, train, config.vqvae_steps, batch_size=config.batch_size, lr=config.vqvae_lr,
        commitment_weight=config.commitment_weight, seed=config.seed, log_interval=config.log_interval,
        log=lambda r: _emit(log_fn, r.line("vqvae")),
    )
    return model, history


def aggregate(config: RunConfig, model: VQVAE, train: DatasetManifest, log_fn: LogFn | None = None) -> tuple[VQVAE, AggregationReport]:
    new, report = run_aggregation(model, train, config, log_fn=lambda r: _emit(log_fn, r.line("finetune")))
    for line in report.lines():
        _emit(log_fn, f"stage=aggregate {line}")
    return new, report


def fit_prior(
    config: RunConfig,
    vqvae: VQVAE,
    train: DatasetManifest,
    causal: bool | None = None,
    log_fn: LogFn | None = None,
) -> tuple[PriorModel, list[PriorLog]]:
    prior = build_prior(config, vqvae.codebook.n_codes, causal=causal)
    history = train_prior(
        prior, sequences_for(vqvae, train), epochs=config.prior_epochs, rate=config.tamper_rate,
        beta=config.beta, seed=config.seed, batch_size=config.prior_batch_size, lr=config.prior_lr,
        reduction=config.loss_reduction, log=lambda r: _emit(log_fn, r.line("prior")),
    )
    return prior, history


def score_split(
    config: RunConfig,
    vqvae: VQVAE,
    prior: PriorModel | None,
    test: DatasetManifest,
    provenance: dict | None = None,
) -> list[AnomalyScoreMap]:
    """Score every test image; ``prior=None`` gives the autoencoder-only baseline."""
    if prior is None:
        return [score_image_reconstruction(vqvae, s, config) for s in test]
    return [score_image(vqvae, prior, s, config, provenance) for s in test]


def evaluate_split(config: RunConfig, maps: Sequence[AnomalyScoreMap], test: DatasetManifest, label: str = "") -> EvaluationReport:
    return evaluate(
        [m.scores for m in maps], [s.mask_or_zeros() for s in test], ids=[s.id for s in test],
        kinds=[s.kind for s in test], n_thresholds=config.dice_sweep, label=label,
    )


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class Variant:
    name: str
    use_prior: bool = True
    causal: bool = False
    aggregate: bool = True


DEFAULT_VARIANTS = (
    Variant("vqvae-only", use_prior=False),
    Variant("causal-attention", causal=True),
    Variant("full-attention"),
)


@dataclass
class AblationRow:
    variant: str
    ap: float
    dice: float
    auroc: float
    config_hash: str
    by_kind: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class AblationResult:
    rows: list[AblationRow]
    aggregation: dict[str, float] = field(default_factory=dict)
    reports: dict[str, EvaluationReport] = field(default_factory=dict)

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == name)

    def to_text(self) -> str:
        lines = [f"# lsgs-ablation v{REPORT_VERSION}", f"{'variant':<20} {'AP':>8} {'Dice':>8} {'AUROC':>8}  config"]
        for r in self.rows:
            lines.append(f"{r.variant:<20} {r.ap:>8.4f} {r.dice:>8.4f} {r.auroc:>8.4f}  {r.config_hash}")
        if self.aggregation:
            lines.append("")
            lines += [f"{k}={v}" for k, v in sorted(self.aggregation.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"report_version": REPORT_VERSION, "rows": [asdict(r) for r in self.rows], "aggregation": self.aggregation},
            sort_keys=True, indent=1,
        ) + "\n"


def _variant_hash(config: RunConfig, variant: Variant) -> str:
    blob = json.dumps({"config": config.to_dict(), "variant": asdict(variant)}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def metrics_by_kind(config: RunConfig, maps: Sequence[AnomalyScoreMap], test: DatasetManifest) -> dict[str, dict[str, float]]:
    """Metrics restricted to normal samples plus one anomaly kind at a time."""
    out = {}
    kinds = sorted({s.kind for s in test if s.kind != "normal"})
    for kind in kinds:
        keep = [i for i, s in enumerate(test) if s.kind in ("normal", kind)]
        sub = DatasetManifest("test", [test.samples[i] for i in keep])
        rep = evaluate_split(config, [maps[i] for i in keep], sub)
        out[kind] = {"ap": rep.ap, "auroc": rep.auroc, "dice": rep.dice}
    return out


def run_ablation(
    config: RunConfig,
    train: DatasetManifest,
    test: DatasetManifest,
    variants: Sequence[Variant] = DEFAULT_VARIANTS,
    log_fn: LogFn | None = None,
) -> AblationResult:
    """Train/evaluate each variant from the same seed and tabulate AP, Dice, AUROC.

    Autoencoders are shared between variants with the same aggregation flag,
    priors between variants with the same attention type; every stage is
    deterministic, so sharing gives the same numbers as retraining.
    """
    base, _ = fit_vqvae(config, train, log_fn)
    vqvaes: dict[bool, VQVAE] = {False: base}
    aggregation: dict[str, float] = {}
    priors: dict[tuple[bool, bool], PriorModel] = {}
    rows, reports = [], {}
    for variant in variants:
        if variant.aggregate and True not in vqvaes:
            vqvaes[True], rep = aggregate(config, base, train, log_fn)
            aggregation = asdict(rep)
        vq = vqvaes[variant.aggregate]
        prior = None
        if variant.use_prior:
            key = (variant.aggregate, variant.causal)
            if key not in priors:
                priors[key], _ = fit_prior(config, vq, train, causal=variant.causal, log_fn=log_fn)
            prior = priors[key]
        maps = score_split(config, vq, prior, test)
        report = evaluate_split(config, maps, test, label=variant.name)
        reports[variant.name] = report
        rows.append(AblationRow(variant.name, report.ap, report.dice, report.auroc,
                                _variant_hash(config, variant), metrics_by_kind(config, maps, test)))
        _emit(log_fn, f"stage=ablation variant={variant.name} ap={report.ap:.6f} dice={report.dice:.6f} auroc={report.auroc:.6f}")
    return AblationResult(rows, aggregation, reports)
