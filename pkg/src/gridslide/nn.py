"""Parameter-dict layer helpers shared by every model in the package.

Models are plain functions over ``dict[str, Tensor]``; names follow
``<prefix>.<layer>.w`` / ``.b`` / ``.g`` so optimizers can pick decay groups
and checkpoints stay flat.
"""
from __future__ import annotations

import numpy as np

from gridslide.numerics import Tensor, gelu, layer_norm, matmul

Params = dict[str, Tensor]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def add_linear(params: Params, name: str, fan_in: int, fan_out: int, rng, std: float = 0.02,
               bias: bool = True) -> None:
    params[f"{name}.w"] = Tensor(trunc_normal(rng, (fan_in, fan_out), std), requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def add_norm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def apply_linear(params: Params, name: str, x):
    y = matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y + b if b is not None else y


def apply_norm(params: Params, name: str, x, eps: float = 1e-6):
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def apply_mlp(params: Params, name: str, x):
    return apply_linear(params, f"{name}.fc2", gelu(apply_linear(params, f"{name}.fc1", x)))


def subset(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def weight_decay_map(params: Params, wd: float) -> dict[str, float]:
    """Decay only matrices named ``*.w``; biases, norms, tokens and scalars are exempt."""
    return {k: (wd if k.endswith(".w") and v.data.ndim == 2 else 0.0) for k, v in params.items()}


def to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def from_arrays(arrays: dict[str, np.ndarray], requires_grad: bool = True) -> Params:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad) for k, v in arrays.items()}


def clone(params: Params, requires_grad: bool = True) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def n_params(params: Params) -> int:
    return int(sum(v.data.size for v in params.values()))
