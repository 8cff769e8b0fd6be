"""Bootstrap confidence statistics and report records."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gridslide._io import atomic_write_text
from gridslide.errors import ConfigError, MetricUndefined
from gridslide.rng import stream

N_BOOTSTRAP = 1000


@dataclass
class BootstrapResult:
    mean: float
    std: float
    values: np.ndarray
    redraws: int = 0

    @property
    def n(self) -> int:
        return int(self.values.size)


def bootstrap_ci(preds, labels, metric: Callable, n: int = N_BOOTSTRAP, seed: int = 0) -> BootstrapResult:
    """Resample the test index set ``n`` times with replacement.

    A resample on which ``metric`` raises MetricUndefined is redrawn; more
    than 10n attempts in total is an error.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    preds, labels = np.asarray(preds), np.asarray(labels)
    N = labels.shape[0]
    rng = stream(seed, "bootstrap")
    values = np.empty(n)
    done = attempts = 0
    while done < n:
        if attempts >= 10 * n:
            raise MetricUndefined(f"metric undefined on too many resamples ({attempts} attempts)")
        attempts += 1
        idx = rng.integers(0, N, size=N)
        try:
            values[done] = metric(preds[idx], labels[idx])
        except MetricUndefined:
            continue
        done += 1
    return BootstrapResult(float(values.mean()), float(values.std()), values, attempts - n)


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, tuple[float, float, float]] = field(default_factory=dict)  # name -> (point, mean, std)
    n_bootstrap: int = N_BOOTSTRAP
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, task: str, preds, labels, metric_fns: dict[str, Callable], n_bootstrap: int = N_BOOTSTRAP,
              seed: int = 0, **extra) -> "EvalReport":
        rep = cls(task, {}, n_bootstrap, seed, dict(extra))
        for name, fn in metric_fns.items():
            point = float(fn(preds, labels))
            b = bootstrap_ci(preds, labels, fn, n_bootstrap, seed)
            rep.metrics[name] = (point, b.mean, b.std)
        return rep

    def to_jsonl(self) -> str:
        rows = []
        for name, (point, mean, std) in self.metrics.items():
            rows.append(json.dumps({"task": self.task, "metric": name, "point": point, "boot_mean": mean,
                                    "boot_std": std, "n_bootstrap": self.n_bootstrap, "seed": self.seed},
                                   sort_keys=True))
        return "\n".join(rows) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "metric", "point", "boot_mean", "boot_std"])
        for name, (point, mean, std) in self.metrics.items():
            w.writerow([self.task, name, repr(point), repr(mean), repr(std)])
        return buf.getvalue()

    def write(self, stem: str | os.PathLike) -> None:
        stem = str(stem)
        atomic_write_text(stem + ".jsonl", self.to_jsonl())
        atomic_write_text(stem + ".csv", self.to_csv())
