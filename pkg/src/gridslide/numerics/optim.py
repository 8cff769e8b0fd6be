"""AdamW with decoupled weight decay, EMA teacher updates and grad clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridslide.errors import ConfigError, ShapeError
from gridslide.numerics.tensor import Tensor


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8) -> "OptimizerState":
        state = cls(betas=tuple(betas), eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    wd: float | dict[str, float] = 0.0,
) -> None:
    """One in-place AdamW update.

    ``wd`` is either a single coefficient or a per-parameter mapping (so that
    biases and norm gains can be excluded). Decay is decoupled: ``lr*wd*p``
    is subtracted from the parameter independently of the moment estimates.
    Parameters whose gradient is ``None`` are skipped entirely.
    """
    if lr < 0 or not np.isfinite(lr):
        raise ConfigError(f"learning rate must be finite and >= 0, got {lr}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        decay = wd.get(name, 0.0) if isinstance(wd, dict) else wd
        if decay:
            p.data -= lr * decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {momentum}")
    for name, t in teacher.items():
        s = student[name]
        if s.data.shape != t.data.shape:
            raise ShapeError(f"EMA shape mismatch for {name}: {t.data.shape} vs {s.data.shape}")
        if momentum == 1.0:
            continue
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
