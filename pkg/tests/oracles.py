"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def brute_force_nearest(z, codes):
    """Index of the nearest code for each vector; strict < keeps the first of a tie."""
    out = []
    for v in z:
        best, best_d = 0, None
        for j, c in enumerate(codes):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, c))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def enumerated_ap(scores, labels):
    scores, labels = list(scores), list(labels)
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        selected = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(selected)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / len(selected))
        prev_recall = recall
    return ap


def counting_dice(scores, labels, t):
    tp = pred = gt = 0
    for s, y in zip(scores, labels):
        p = s >= t
        pred += p
        gt += y
        tp += p and y
    return 1.0 if pred + gt == 0 else 2 * tp / (pred + gt)


def naive_smooth(a):
    """3x3 min filter then 7x7 mean, both with edge replication, by explicit loops."""
    h, w = a.shape
    clamp = lambda v, n: min(max(v, 0), n - 1)
    m = np.empty_like(a)
    for i in range(h):
        for j in range(w):
            m[i, j] = min(a[clamp(i + di, h), clamp(j + dj, w)] for di in (-1, 0, 1) for dj in (-1, 0, 1))
    out = np.empty_like(a)
    for i in range(h):
        for j in range(w):
            total = 0.0
            for di in range(-3, 4):
                for dj in range(-3, 4):
                    total += float(m[clamp(i + di, h), clamp(j + dj, w)])
            out[i, j] = total / 49.0
    return out
