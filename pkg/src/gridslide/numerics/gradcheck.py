"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from gridslide.numerics.tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor sits above central-difference round-off (~1e-10 for O(1) losses
    at h=1e-5) so gradients that are analytically zero do not register as
    100% errors.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _ridders(at: Callable[[float], float], h: float, shrink: float = 1.4, n_tab: int = 10) -> float:
    """Ridders' extrapolation of central differences over steps h, h/1.4, ...;
    returns the tableau entry with the smallest error estimate."""
    c2 = shrink * shrink
    prev = [(at(h) - at(-h)) / (2 * h)]
    best, err = prev[0], np.inf
    for i in range(1, n_tab):
        h /= shrink
        row = [(at(h) - at(-h)) / (2 * h)]
        fac = c2
        for j in range(1, i + 1):
            row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1.0))
            fac *= c2
            e = max(abs(row[j] - row[j - 1]), abs(row[j] - prev[j - 1]))
            if e <= err:
                best, err = row[j], e
        if abs(row[i] - prev[i - 1]) >= 2.0 * err:
            break
        prev = row
    return best


def _central(loss_fn, flat: np.ndarray, i: int, h: float, stencil: int | str) -> float:
    """Derivative along flat[i]: 3- or 5-point central difference, or
    ``"ridders"`` (adaptive extrapolation, robust where the loss curves sharply
    and a fixed step is caught between truncation and round-off)."""
    orig = flat[i]

    def at(step):
        flat[i] = orig + step
        return float(loss_fn().data)

    try:
        if stencil == 3:
            return (at(h) - at(-h)) / (2 * h)
        if stencil == 5:
            return (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
        if stencil == "ridders":
            return _ridders(at, h)
        raise ValueError("stencil must be 3, 5 or 'ridders'")
    finally:
        flat[i] = orig


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5, stencil: int | str = 3) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            gflat[i] = _central(loss_fn, flat, i, h, stencil)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int | str = 3,
) -> float:
    """Max relative error between backprop and central differences.

    With ``max_entries`` only a random subset of coordinates per parameter is
    probed (the analytic pass is always complete).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    with no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                num = _central(loss_fn, flat, i, h, stencil)
                err = float(relative_error(np.array(analytic.reshape(-1)[i]), np.array(num)))
                worst = max(worst, err)
    return worst
