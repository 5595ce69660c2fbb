"""Pixel-level AP, AUROC and best-threshold Dice.

All metrics pool pixels over the whole test split.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from lsgs.errors import UndefinedMetricError

REPORT_VERSION = 1


def _flat(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in size")
    return s, y


def _check_both_classes(y: np.ndarray, name: str) -> None:
    if y.all() or not y.any():
        raise UndefinedMetricError(f"{name} needs both positive and negative pixels")


def pixel_ap(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    One PR point per distinct score; AP = sum over points of
    (recall gain) x (precision at that point).
    """
    s, y = _flat(scores, labels)
    _check_both_classes(y, "AP")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, len(s) - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    gains = np.diff(np.concatenate([[0.0], recall]))
    return float((gains * precision).sum())


def pixel_auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted half."""
    s, y = _flat(scores, labels)
    _check_both_classes(y, "AUROC")
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def quantile_thresholds(scores, n: int = 101) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    return np.quantile(s, np.linspace(0.0, 1.0, n))


def dice_at(scores, labels, threshold: float) -> float:
    s, y = _flat(scores, labels)
    pred = s >= threshold
    denom = pred.sum() + y.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (pred & y).sum() / denom)


def dice_curve(scores, labels, thresholds) -> np.ndarray:
    """Dice(t) for each t with pred = score >= t; empty-vs-empty counts as 1."""
    s, y = _flat(scores, labels)
    t = np.asarray(thresholds, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    pos_suffix = np.concatenate([np.cumsum(y[order][::-1])[::-1], [0]])
    first = np.searchsorted(s_sorted, t, side="left")
    n_pred = len(s) - first
    inter = pos_suffix[first]
    denom = n_pred + y.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(denom == 0, 1.0, 2.0 * inter / np.maximum(denom, 1))
    return dice


def best_dice(scores, labels, sweep=None, n_thresholds: int = 101) -> tuple[float, float]:
    """Maximum Dice over a threshold sweep; ties go to the smallest threshold.

    The default sweep is ``n_thresholds`` evenly spaced quantiles of the scores.
    """
    thresholds = quantile_thresholds(scores, n_thresholds) if sweep is None else np.asarray(sweep, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("threshold sweep is empty")
    thresholds = np.sort(thresholds)
    curve = dice_curve(scores, labels, thresholds)
    best = int(np.argmax(curve))
    return float(curve[best]), float(thresholds[best])


@dataclass
class EvaluationReport:
    ap: float
    auroc: float
    dice: float
    dice_threshold: float
    positives: int
    negatives: int
    per_sample: list[dict] = field(default_factory=list)
    label: str = ""

    def to_json(self) -> str:
        return json.dumps({"report_version": REPORT_VERSION, **asdict(self)}, sort_keys=True, indent=1) + "\n"

    def to_text(self) -> str:
        lines = [
            f"# lsgs-report v{REPORT_VERSION} {self.label}".rstrip(),
            f"{'metric':<8} {'fraction':>10} {'percent':>8}",
        ]
        for name, v in (("AP", self.ap), ("AUROC", self.auroc), ("Dice", self.dice)):
            lines.append(f"{name:<8} {v:>10.6f} {100 * v:>8.2f}")
        lines.append(f"dice_threshold {self.dice_threshold!r}")
        lines.append(f"pixels positive={self.positives} negative={self.negatives}")
        lines.append("")
        lines.append(f"{'sample':<24} {'kind':<16} {'pos_px':>7} {'dice':>8}")
        for row in self.per_sample:
            lines.append(f"{row['id']:<24} {row.get('kind', ''):<16} {row['positives']:>7} {row['dice']:>8.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt, js = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(self.to_json())
        return txt, js


def evaluate(
    scores: Sequence[np.ndarray] | np.ndarray,
    masks: Sequence[np.ndarray] | np.ndarray,
    ids: Sequence[str] | None = None,
    kinds: Sequence[str] | None = None,
    n_thresholds: int = 101,
    label: str = "",
) -> EvaluationReport:
    """Pooled AP / AUROC / best Dice plus per-sample Dice at the pooled threshold."""
    scores = np.stack([np.asarray(s, dtype=np.float64) for s in scores])
    masks = np.stack([np.asarray(m) > 0 for m in masks])
    if scores.shape != masks.shape:
        raise ValueError(f"score stack {scores.shape} does not match mask stack {masks.shape}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(scores))]
    ap = pixel_ap(scores, masks)
    auroc = pixel_auroc(scores, masks)
    dice, thr = best_dice(scores, masks, n_thresholds=n_thresholds)
    per_sample = []
    for i, (s, m) in enumerate(zip(scores, masks)):
        row = {"id": ids[i], "positives": int(m.sum()), "dice": dice_at(s, m, thr)}
        if kinds is not None:
            row["kind"] = kinds[i]
        per_sample.append(row)
    return EvaluationReport(ap, auroc, dice, thr, int(masks.sum()), int((~masks).sum()), per_sample, label)
