"""Classification and text metrics."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from gridslide.errors import MetricUndefined, ShapeError
from gridslide.text import as_tokens


def _check(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(preds), np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeError(f"preds {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise MetricUndefined("empty input")
    return p, y


def confusion_matrix(preds, labels, n_classes: int | None = None) -> np.ndarray:
    """cm[true, pred] counts."""
    p, y = _check(preds, labels)
    C = n_classes or int(max(p.max(), y.max())) + 1
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (y.astype(np.int64), p.astype(np.int64)), 1)
    return cm


def balanced_accuracy(preds, labels) -> float:
    """Mean recall over the classes present in ``labels``."""
    p, y = _check(preds, labels)
    classes = np.unique(y)
    return float(np.mean([np.mean(p[y == c] == c) for c in classes]))


def weighted_f1(preds, labels) -> float:
    p, y = _check(preds, labels)
    total = 0.0
    for c in np.unique(y):
        tp = np.sum((p == c) & (y == c))
        fp = np.sum((p == c) & (y != c))
        fn = np.sum((p != c) & (y == c))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        total += f1 * np.sum(y == c)
    return float(total / y.size)


def auroc(scores, labels) -> float:
    """Binary AUROC as the Mann-Whitney statistic; tied scores count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUROC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc_ovr(probs, labels) -> float:
    """Macro one-vs-rest AUROC over the classes present in ``labels``."""
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise MetricUndefined("AUROC needs at least two classes")
    if P.shape[1] == 2 and classes.size == 2:
        return auroc(P[:, 1], y == 1)
    return float(np.mean([auroc(P[:, c], y == c) for c in classes]))


def kappa_quadratic(preds, labels, n_classes: int | None = None) -> float:
    """Quadratic-weighted Cohen's kappa, w_ij = (i-j)^2 / (C-1)^2."""
    p, y = _check(preds, labels)
    cm = confusion_matrix(p, y, n_classes).astype(np.float64)
    C = cm.shape[0]
    if C == 1:
        return 1.0
    i, j = np.indices((C, C))
    w = (i - j) ** 2 / (C - 1) ** 2
    O = cm / cm.sum()
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    num, den = float((w * O).sum()), float((w * E).sum())
    if den == 0.0:
        # both marginals sit on one class, so preds == labels
        return 1.0
    return 1.0 - num / den


# -- text ---------------------------------------------------------------------

def _overlap(cand: list[str], ref: list[str]) -> int:
    rc = Counter(ref)
    return sum(min(n, rc[t]) for t, n in Counter(cand).items())


def bleu1(candidate: str | Sequence[str], reference: str | Sequence[str]) -> float:
    c, r = as_tokens(candidate), as_tokens(reference)
    if not c or not r:
        return 0.0
    precision = _overlap(c, r) / len(c)
    bp = 1.0 if len(c) > len(r) else float(np.exp(1.0 - len(r) / len(c)))
    return precision * bp


def rouge1(candidate: str | Sequence[str], reference: str | Sequence[str]) -> float:
    c, r = as_tokens(candidate), as_tokens(reference)
    if not c or not r:
        return 0.0
    m = _overlap(c, r)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    return 2 * p * rec / (p + rec)


def _align(c: list[str], r: list[str]) -> list[tuple[int, int]]:
    """Exact-match alignment: each candidate token takes the first unused equal
    reference token."""
    used = [False] * len(r)
    pairs = []
    for i, tok in enumerate(c):
        for j, rt in enumerate(r):
            if not used[j] and rt == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(candidate: str | Sequence[str], reference: str | Sequence[str]) -> float:
    """Exact-match METEOR: Fmean (recall-weighted 9:1) times
    (1 - 0.5 * frag^3), frag = (chunks - 1) / (matches - 1)."""
    c, r = as_tokens(candidate), as_tokens(reference)
    if not c or not r:
        return 0.0
    pairs = _align(c, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    fmean = 10 * p * rec / (rec + 9 * p)
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    frag = (chunks - 1) / (m - 1) if m > 1 else 0.0
    return fmean * (1.0 - 0.5 * frag ** 3)
