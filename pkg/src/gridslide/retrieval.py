"""Exact slide-to-slide and cross-modal retrieval with the associated protocols."""
from __future__ import annotations

import csv
import io
import logging
import os
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gridslide._io import Reader, atomic_write_bytes, atomic_write_text, pack_string
from gridslide.errors import ConfigError, DataError
from gridslide.rng import stream

log = logging.getLogger(__name__)

EMBS_MAGIC = b"EMBS"
EMBS_VERSION = 1
ZERO_NORM = 1e-12


@dataclass
class RetrievalIndex:
    keys: np.ndarray  # (N, D) unit rows
    labels: np.ndarray
    ids: list[str]
    centroid: np.ndarray

    def __len__(self) -> int:
        return self.keys.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.centroid
        n = np.linalg.norm(Z, axis=1, keepdims=True)
        return Z / np.where(n > ZERO_NORM, n, 1.0)


@dataclass
class RetrievalResult:
    query_id: str
    query_label: int
    ranked_ids: list[str]
    ranked_labels: np.ndarray
    distances: np.ndarray

    def hit(self, k: int) -> bool:
        return bool(np.any(self.ranked_labels[:k] == self.query_label))


def build_index(keys, labels, ids: Sequence[str] | None = None) -> RetrievalIndex:
    """Subtract the raw-key centroid, then L2-normalize; keys that collapse to
    zero norm are dropped with a warning."""
    X = np.asarray(keys, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DataError("need at least one key vector")
    labels = np.asarray(labels)
    ids = list(ids) if ids is not None else [str(i) for i in range(X.shape[0])]
    centroid = X.mean(axis=0)
    Z = X - centroid
    n = np.linalg.norm(Z, axis=1)
    keep = n > ZERO_NORM
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} key(s) have zero norm after centering and were excluded",
                      RuntimeWarning, stacklevel=2)
    Z = Z[keep] / n[keep, None]
    return RetrievalIndex(Z, labels[keep], [i for i, k in zip(ids, keep) if k], centroid)


def query_topk(index: RetrievalIndex, query, k: int, query_id: str = "", query_label: int = -1,
               exclude_id: str | None = None) -> RetrievalResult:
    """Exact K nearest keys by Euclidean distance; equal distances resolve by
    key id. K beyond the index size returns every key."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    q = index.transform(query)[0]
    d = np.sqrt(np.maximum(((index.keys - q) ** 2).sum(axis=1), 0.0))
    order = np.lexsort((np.asarray(index.ids, dtype=str), d)) if len(index) else np.zeros(0, np.int64)
    if exclude_id is not None:
        order = np.array([i for i in order if index.ids[i] != exclude_id], dtype=np.int64)
    order = order[:k]
    return RetrievalResult(query_id, int(query_label), [index.ids[i] for i in order], index.labels[order], d[order])


def query_all(index: RetrievalIndex, queries, labels, ids: Sequence[str] | None = None, k: int = 5,
              leave_one_out: bool = False) -> list[RetrievalResult]:
    Q = np.asarray(queries, dtype=np.float64)
    ids = list(ids) if ids is not None else [f"q{i}" for i in range(len(Q))]
    return [query_topk(index, Q[i], k, ids[i], int(labels[i]), ids[i] if leave_one_out else None)
            for i in range(len(Q))]


def acc_at_k(results: Sequence[RetrievalResult], k: int) -> float:
    if not results:
        raise DataError("no retrieval results")
    return float(np.mean([r.hit(k) for r in results]))


def majority_hit(top_labels: Sequence[int], label: int) -> bool:
    """Hit only if ``label`` is the unique most frequent label."""
    counts = Counter(int(x) for x in top_labels)
    if not counts:
        return False
    best = max(counts.values())
    modal = [c for c, n in counts.items() if n == best]
    return modal == [int(label)]


def mv_acc_at_5(results: Sequence[RetrievalResult]) -> float:
    if not results:
        raise DataError("no retrieval results")
    return float(np.mean([majority_hit(r.ranked_labels[:5], r.query_label) for r in results]))


def slide_retrieval_metrics(results: Sequence[RetrievalResult]) -> dict[str, float]:
    out = {f"acc@{k}": acc_at_k(results, k) for k in (1, 3, 5)}
    out["mvacc@5"] = mv_acc_at_5(results)
    return out


# -- cross-modal -----------------------------------------------------------------

XMODAL_KS = (1, 3, 5, 10)


def _unit_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DataError("zero-norm embedding")
    return X / n


def cross_modal_recall(query_embs, key_embs, query_labels, key_labels=None, ks: Sequence[int] = XMODAL_KS,
                       match: str = "class") -> dict[str, float]:
    """Recall@K by cosine similarity. ``match='class'`` counts a retrieved item
    as correct when it shares the query's class; ``match='id'`` requires the
    paired item (same row index)."""
    Q, K = _unit_rows(query_embs), _unit_rows(key_embs)
    ql = np.asarray(query_labels)
    kl = np.asarray(key_labels if key_labels is not None else query_labels)
    if match not in ("class", "id"):
        raise ConfigError("match must be 'class' or 'id'")
    sims = Q @ K.T
    order = np.argsort(-sims, axis=1, kind="stable")
    if match == "class":
        correct = kl[order] == ql[:, None]
    else:
        correct = order == np.arange(len(Q))[:, None]
    out = {f"R@{k}": float(np.mean(correct[:, :k].any(axis=1))) for k in ks}
    out["mean_recall"] = float(np.mean([out[f"R@{k}"] for k in ks]))
    return out


# -- rare-cancer protocol -----------------------------------------------------------

@dataclass
class FoldLog:
    fold: int
    query_ids: list[str]
    support_size: int
    metrics: dict[str, float]


@dataclass
class RareCancerResult:
    folds: list[FoldLog] = field(default_factory=list)
    support_only: list[int] = field(default_factory=list)  # rare classes too small to split
    pooled: dict[str, float] = field(default_factory=dict)  # every query of every fold at once

    def values(self, name: str) -> list[float]:
        """Per-fold values, skipping folds that received no query."""
        return [f.metrics[name] for f in self.folds if f.metrics]

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def std(self, name: str) -> float:
        return float(np.std(self.values(name)))


def rare_folds(labels, patients, n_folds: int = 5, seed: int = 0) -> tuple[np.ndarray, list[int]]:
    """Patient-level fold id per rare item (-1 = support only), spreading each
    class round-robin over folds after a seeded shuffle of its patients."""
    labels, patients = np.asarray(labels), np.asarray(patients)
    folds = np.full(labels.shape[0], -1, dtype=np.int64)
    small = []
    rng = stream(seed, "rare_folds")
    offset = 0
    for c in np.unique(labels):
        pts = np.unique(patients[labels == c])
        if pts.size < n_folds:
            small.append(int(c))
            log.info("rare class %s has %d patients (< %d folds); kept in support", c, pts.size, n_folds)
            continue
        pts = rng.permutation(pts)
        for j, p in enumerate(pts):
            folds[(patients == p) & (labels == c)] = (j + offset) % n_folds
        offset += pts.size
    return folds, small


def rare_cancer_protocol(rare_embs, rare_labels, rare_ids: Sequence[str], common_embs, common_labels,
                         common_ids: Sequence[str], rare_patients=None, n_folds: int = 5,
                         seed: int = 0) -> RareCancerResult:
    """Each fold of the rare set queries an index of the other rare folds plus
    the common set; metrics are reported per fold."""
    rare_embs = np.asarray(rare_embs, dtype=np.float64)
    rare_labels = np.asarray(rare_labels)
    patients = np.asarray(rare_patients) if rare_patients is not None else np.asarray(rare_ids)
    folds, small = rare_folds(rare_labels, patients, n_folds, seed)
    res = RareCancerResult(support_only=small)
    rare_ids = list(rare_ids)
    everything: list[RetrievalResult] = []
    for f in range(n_folds):
        q = folds == f
        s = ~q
        keys = np.concatenate([rare_embs[s], np.asarray(common_embs, dtype=np.float64)])
        labels = np.concatenate([rare_labels[s], np.asarray(common_labels)])
        ids = [i for i, m in zip(rare_ids, s) if m] + list(common_ids)
        index = build_index(keys, labels, ids)
        qids = [i for i, m in zip(rare_ids, q) if m]
        results = query_all(index, rare_embs[q], rare_labels[q], qids, k=5)
        everything += results
        res.folds.append(FoldLog(f, qids, len(ids), slide_retrieval_metrics(results) if results else {}))
    if everything:
        res.pooled = slide_retrieval_metrics(everything)
    return res


# -- persistence ----------------------------------------------------------------------

def encode_store(ids: Sequence[str], labels: Sequence[int], vectors: np.ndarray) -> bytes:
    V = np.asarray(vectors, dtype="<f4")
    if V.ndim != 2 or V.shape[0] != len(ids) or len(labels) != len(ids):
        raise DataError("ids, labels and vectors must align")
    parts = [EMBS_MAGIC, struct.pack("<III", EMBS_VERSION, V.shape[0], V.shape[1])]
    for i, lab, v in zip(ids, labels, V):
        parts += [pack_string(i), struct.pack("<i", int(lab)), v.tobytes()]
    return b"".join(parts)


def decode_store(buf: bytes, source: str = "<buffer>") -> tuple[list[str], np.ndarray, np.ndarray]:
    r = Reader(buf, source)
    r.expect_magic(EMBS_MAGIC)
    version, count, dim = r.unpack("<III")
    if version != EMBS_VERSION:
        raise DataError(f"{source}: unsupported EMBS version {version}")
    ids, labels = [], np.empty(count, dtype=np.int64)
    V = np.empty((count, dim), dtype=np.float64)
    for n in range(count):
        ids.append(r.string())
        labels[n] = r.i32()
        V[n] = np.frombuffer(r.take(4 * dim), dtype="<f4")
    if not r.at_end():
        raise DataError(f"{source}: trailing bytes after {count} records")
    return ids, labels, V


def write_store(path: str | os.PathLike, ids, labels, vectors) -> None:
    atomic_write_bytes(path, encode_store(ids, labels, vectors))


def read_store(path: str | os.PathLike) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_store(fh.read(), str(path))


def results_csv(results: Sequence[RetrievalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "rank", "key_id", "distance", "hit"])
    for r in results:
        for rank, (kid, lab, d) in enumerate(zip(r.ranked_ids, r.ranked_labels, r.distances), start=1):
            w.writerow([r.query_id, rank, kid, repr(float(d)), int(lab == r.query_label)])
    return buf.getvalue()


def write_results(path: str | os.PathLike, results: Sequence[RetrievalResult]) -> None:
    atomic_write_text(path, results_csv(results))
