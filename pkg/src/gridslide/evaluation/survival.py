"""Ridge Cox regression, Harrell's concordance and the site-preserved fold protocol."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from gridslide.errors import ConfigError, DataError, MetricUndefined, ShapeError

ALPHA_GRID = np.logspace(1, 5, 25)
N_FOLDS = 5


def _check_surv(X, time, event):
    X = np.asarray(X, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    if X.ndim != 2 or time.shape != (X.shape[0],) or event.shape != time.shape:
        raise ShapeError("X (N, D), time (N,), event (N,) required")
    if np.any(time <= 0):
        raise DataError("survival times must be > 0")
    return X, time, event


def cox_objective(beta: np.ndarray, X: np.ndarray, time: np.ndarray, event: np.ndarray,
                  alpha: float) -> tuple[float, np.ndarray]:
    """Mean negative Breslow log partial likelihood + (alpha/2)||beta||^2, and its gradient."""
    n = X.shape[0]
    eta = X @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    order = np.argsort(-time, kind="stable")  # descending time
    t_sorted = time[order]
    cw = np.cumsum(w[order])
    cwx = np.cumsum(w[order, None] * X[order], axis=0)
    # risk set of time t = all j with t_j >= t = prefix up to the last tie of t
    last = np.searchsorted(-t_sorted, -time, side="right") - 1
    ev = np.flatnonzero(event)
    s0 = cw[last[ev]]
    s1 = cwx[last[ev]]
    loglik = (eta[ev] - shift - np.log(s0)).sum()
    grad_ll = X[ev].sum(axis=0) - (s1 / s0[:, None]).sum(axis=0)
    val = -loglik / n + 0.5 * alpha * beta @ beta
    return float(val), -grad_ll / n + alpha * beta


def cox_fit(X, time, event, alpha: float, max_iter: int = 1000) -> np.ndarray:
    X, time, event = _check_surv(X, time, event)
    if event.sum() < 2:
        raise DataError("Cox fit needs at least two events")
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    res = minimize(cox_objective, np.zeros(X.shape[1]), args=(X, time, event, alpha), jac=True,
                   method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-9})
    return res.x


def c_index(risk, time, event) -> float:
    """Harrell's C: pairs (i, j) with t_i < t_j and event_i are comparable;
    concordant when risk_i > risk_j, risk ties count 1/2."""
    r = np.asarray(risk, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event).astype(bool)
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n = comparable.sum()
    if n == 0:
        raise MetricUndefined("no comparable pairs")
    diff = r[:, None] - r[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float((score * comparable).sum() / n)


def site_preserved_folds(sites, n_folds: int = N_FOLDS) -> np.ndarray:
    """Fold id per sample; every site lands in exactly one fold, largest sites
    first into the currently smallest fold."""
    sites = np.asarray(sites)
    uniq, counts = np.unique(sites, return_counts=True)
    if uniq.size < n_folds:
        raise DataError(f"{uniq.size} sites cannot fill {n_folds} site-preserved folds")
    sizes = np.zeros(n_folds, dtype=np.int64)
    fold_of = {}
    for i in np.lexsort((uniq, -counts)):
        f = int(np.argmin(sizes))
        fold_of[uniq[i]] = f
        sizes[f] += counts[i]
    return np.array([fold_of[s] for s in sites])


@dataclass
class SurvivalResult:
    best_alpha: float
    fold_cindex: list[float]
    table: dict[float, list[float]] = field(default_factory=dict)  # alpha -> per-fold c-index

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_cindex))


def survival_eval(X, time, event, folds: np.ndarray, alphas: np.ndarray = ALPHA_GRID) -> SurvivalResult:
    """Train on the other folds, test on each fold, for every alpha; the alpha
    with the best mean test c-index is reported (no separate validation fold)."""
    X, time, event = _check_surv(X, time, event)
    folds = np.asarray(folds)
    table: dict[float, list[float]] = {}
    for a in alphas:
        scores = []
        for f in np.unique(folds):
            tr, te = folds != f, folds == f
            beta = cox_fit(X[tr], time[tr], event[tr], float(a))
            scores.append(c_index(X[te] @ beta, time[te], event[te]))
        table[float(a)] = scores
    best = max(table, key=lambda a: (np.mean(table[a]), -a))
    return SurvivalResult(best, table[best], table)
