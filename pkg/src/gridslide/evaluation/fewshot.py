"""Repeated k-shot evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridslide.errors import ConfigError
from gridslide.evaluation import metrics as M
from gridslide.evaluation.classifiers import (
    DEFAULT_L2,
    DEFAULT_MAX_ITER,
    LabeledEmbeddings,
    logistic_fit,
    simpleshot,
)
from gridslide.rng import stream

SHOTS = (1, 2, 4, 8, 16, 32)
N_RUNS = 50


@dataclass
class FewShotResult:
    evaluator: str
    runs: dict[int, list[float]] = field(default_factory=dict)  # k -> balanced accuracy per run
    supports: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def median(self, k: int) -> float:
        return float(np.median(self.runs[k]))

    def iqr(self, k: int) -> tuple[float, float]:
        q1, q3 = np.percentile(self.runs[k], [25, 75])
        return float(q1), float(q3)


def sample_support(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k indices per class without replacement (all of a class smaller than k)."""
    picks = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        picks.append(members if members.size <= k else np.sort(rng.choice(members, size=k, replace=False)))
    return np.concatenate(picks)


def few_shot_protocol(pool: LabeledEmbeddings, test: LabeledEmbeddings, shots=SHOTS, n_runs: int = N_RUNS,
                      evaluator: str = "simpleshot", seed: int = 0) -> FewShotResult:
    if evaluator not in ("simpleshot", "linear_probe"):
        raise ConfigError(f"unknown evaluator {evaluator!r}")
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    res = FewShotResult(evaluator)
    C = int(max(pool.labels.max(), test.labels.max())) + 1
    for k in shots:
        if k < 1:
            raise ConfigError("shots must be >= 1")
        res.runs[k], res.supports[k] = [], []
        for run in range(n_runs):
            idx = sample_support(pool.labels, k, stream(seed, "fewshot", k, run))
            sup = LabeledEmbeddings(pool.embeddings[idx], pool.labels[idx])
            if evaluator == "simpleshot":
                pred = simpleshot(sup, test)
            else:
                pred = logistic_fit(sup.embeddings, sup.labels, DEFAULT_L2, DEFAULT_MAX_ITER, C).predict(test.embeddings)
            res.runs[k].append(M.balanced_accuracy(pred, test.labels))
            res.supports[k].append(idx)
    return res
