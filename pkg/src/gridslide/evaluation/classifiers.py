"""Embedding classifiers: logistic linear probe, SimpleShot prototypes and kNN."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from gridslide.errors import ConfigError, DataError, ShapeError
from gridslide.evaluation import metrics as M

log = logging.getLogger(__name__)

L2_GRID = np.logspace(-6, 5, 45)
DEFAULT_L2 = 1.0
SWEEP_MAX_ITER = 500
DEFAULT_MAX_ITER = 1000


@dataclass
class LabeledEmbeddings:
    embeddings: np.ndarray
    labels: np.ndarray
    split: str = "train"
    fold: int = 0

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeError("embeddings must be a non-empty (N, D) array")
        if self.labels.shape[0] != self.embeddings.shape[0]:
            raise ShapeError("one label per embedding")
        if self.labels.ndim == 1 and np.any(self.labels < 0):
            raise DataError("class labels must be >= 0")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


# -- logistic regression ------------------------------------------------------

@dataclass
class LogisticModel:
    W: np.ndarray  # (D, C)
    b: np.ndarray  # (C,)
    n_iter: int = 0
    converged: bool = True

    def logits(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.b

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X), axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def cross_entropy(self, X: np.ndarray, y: np.ndarray) -> float:
        lp = log_softmax(self.logits(X), axis=1)
        y = np.asarray(y)
        valid = y < lp.shape[1]
        # labels unseen at fit time get the floor probability of the model
        return float(-np.mean(np.where(valid, lp[np.arange(len(y)), np.minimum(y, lp.shape[1] - 1)], np.log(1e-12))))


def logistic_objective(theta: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """sum_i CE_i + (l2/2)||W||^2 with an unpenalized bias; returns (value, grad)."""
    D, C = X.shape[1], Y.shape[1]
    W = theta[: D * C].reshape(D, C)
    b = theta[D * C:]
    Z = X @ W + b
    lp = log_softmax(Z, axis=1)
    val = -(Y * lp).sum() + 0.5 * l2 * (W * W).sum()
    G = np.exp(lp) - Y
    gW = X.T @ G + l2 * W
    gb = G.sum(axis=0)
    return float(val), np.concatenate([gW.ravel(), gb])


def logistic_fit(X, y, l2: float = DEFAULT_L2, max_iter: int = DEFAULT_MAX_ITER, n_classes: int | None = None,
                 tol: float = 1e-6) -> LogisticModel:
    """Multinomial logistic regression by L-BFGS (stops at grad-norm < tol or max_iter)."""
    if l2 < 0:
        raise ConfigError("l2 must be >= 0")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError("X must be (N, D) and y (N,)")
    C = n_classes or int(y.max()) + 1
    D = X.shape[1]
    present = np.unique(y)
    if present.size == 1:
        warnings.warn("single-class training data: returning a constant predictor", RuntimeWarning, stacklevel=2)
        b = np.full(C, -30.0)
        b[present[0]] = 0.0
        return LogisticModel(np.zeros((D, C)), b, 0, True)
    Y = np.zeros((X.shape[0], C))
    Y[np.arange(len(y)), y] = 1.0
    res = minimize(logistic_objective, np.zeros(D * C + C), args=(X, Y, l2), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 20})
    W = res.x[: D * C].reshape(D, C)
    return LogisticModel(W, res.x[D * C:], int(res.nit), bool(np.linalg.norm(res.jac, np.inf) < tol))


@dataclass
class ProbeResult:
    model: LogisticModel
    l2: float
    val_curve: list[tuple[float, float]] = field(default_factory=list)
    predictions: np.ndarray | None = None
    probabilities: np.ndarray | None = None


def linear_probe(train: LabeledEmbeddings, test: LabeledEmbeddings, val: LabeledEmbeddings | None = None,
                 grid: np.ndarray = L2_GRID) -> ProbeResult:
    """Sweep l2 over ``grid`` picking the lowest validation cross-entropy; with
    no validation split fall back to l2=1 with 1000 iterations. The selected
    model is the train-only fit (no refit on train+val)."""
    C = int(max(train.labels.max(), test.labels.max(), val.labels.max() if val is not None else 0)) + 1
    if val is None or len(val) == 0:
        model = logistic_fit(train.embeddings, train.labels, DEFAULT_L2, DEFAULT_MAX_ITER, C)
        chosen, curve = DEFAULT_L2, []
    else:
        curve, best = [], None
        for l2 in grid:
            m = logistic_fit(train.embeddings, train.labels, float(l2), SWEEP_MAX_ITER, C)
            loss = m.cross_entropy(val.embeddings, val.labels)
            curve.append((float(l2), loss))
            if best is None or loss < best[0]:
                best = (loss, float(l2), m)
        _, chosen, model = best
    probs = model.predict_proba(test.embeddings)
    return ProbeResult(model, chosen, curve, np.argmax(probs, axis=1), probs)


# -- prototype / neighbour classifiers ---------------------------------------

def center_normalize(X: np.ndarray, center: np.ndarray) -> np.ndarray:
    Z = np.asarray(X, dtype=np.float64) - center
    n = np.linalg.norm(Z, axis=1, keepdims=True)
    return Z / np.where(n > 0, n, 1.0)


def _centering(train: LabeledEmbeddings, val: LabeledEmbeddings | None) -> np.ndarray:
    X = train.embeddings if val is None else np.concatenate([train.embeddings, val.embeddings])
    return X.mean(axis=0)


def simpleshot(train: LabeledEmbeddings, test: LabeledEmbeddings | np.ndarray,
               val: LabeledEmbeddings | None = None) -> np.ndarray:
    """Nearest class-mean prototype after centering and L2 normalization.

    Classes are 0..max(label); an absent class id in that range is an error.
    Distance ties go to the smallest class id.
    """
    Xq = test.embeddings if isinstance(test, LabeledEmbeddings) else np.asarray(test, dtype=np.float64)
    center = _centering(train, val)
    A = center_normalize(train.embeddings, center)
    Q = center_normalize(Xq, center)
    C = int(train.labels.max()) + 1
    protos = []
    for c in range(C):
        members = A[train.labels == c]
        if members.shape[0] == 0:
            raise DataError(f"class {c} has no training sample")
        protos.append(members.mean(axis=0))
    P = np.stack(protos)
    d = ((Q[:, None, :] - P[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)  # first minimum = smallest class id


def knn_predict(train: LabeledEmbeddings, test: LabeledEmbeddings | np.ndarray, k: int = 20,
                val: LabeledEmbeddings | None = None) -> np.ndarray:
    """Majority vote among the k nearest (centered, normalized) train points.

    Equal distances keep train order (stable sort); vote ties go to the
    smallest class id; k > N_train uses every train point.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    Xq = test.embeddings if isinstance(test, LabeledEmbeddings) else np.asarray(test, dtype=np.float64)
    center = _centering(train, val)
    A = center_normalize(train.embeddings, center)
    Q = center_normalize(Xq, center)
    k = min(k, A.shape[0])
    C = int(train.labels.max()) + 1
    d = ((Q[:, None, :] - A[None]) ** 2).sum(-1)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = np.zeros((Q.shape[0], C), dtype=np.int64)
    for i, row in enumerate(nearest):
        np.add.at(votes[i], train.labels[row], 1)
    return np.argmax(votes, axis=1)


def classification_metrics(preds: np.ndarray, labels: np.ndarray, probs: np.ndarray | None = None) -> dict[str, float]:
    out = {"balanced_accuracy": M.balanced_accuracy(preds, labels), "weighted_f1": M.weighted_f1(preds, labels)}
    if probs is not None and np.unique(labels).size > 1:
        out["auroc"] = M.auroc_ovr(probs, labels)
    return out
