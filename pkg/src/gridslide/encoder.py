"""Slide encoder: feature MLP, pre-norm transformer blocks with 2D ALiBi, CLS pooling.

Positions only enter through attention biases (or the optional absolute /
rotary providers used for ablations), so one parameter set encodes crops
and whole grids of any size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from gridslide import nn
from gridslide.embeddings import SlideEmbedding
from gridslide.errors import ConfigError, DataError
from gridslide.feature_grid import CropView, FeatureGrid
from gridslide.numerics import Tensor, concat, matmul, no_grad
from gridslide.numerics import tensor as T

POS_ENCODINGS = ("alibi", "none", "absolute", "rotary")


@dataclass
class EncoderConfig:
    layers: int = 6
    heads: int = 12
    head_dim: int = 64
    mlp_hidden: int = 3072
    input_dim: int = 768
    drop_path_rate: float = 0.1
    pos_encoding: str = "alibi"
    ln_eps: float = 1e-6

    def __post_init__(self):
        for f in ("layers", "heads", "head_dim", "mlp_hidden", "input_dim"):
            if getattr(self, f) < 1:
                raise ConfigError(f"encoder {f} must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigError(f"pos_encoding must be one of {POS_ENCODINGS}")
        if self.pos_encoding == "rotary" and self.head_dim % 4:
            raise ConfigError("rotary encoding needs head_dim divisible by 4")

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def full(cls, **kw) -> "EncoderConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "EncoderConfig":
        base = dict(layers=4, heads=4, head_dim=16, mlp_hidden=256, input_dim=32)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> nn.Params:
    E = cfg.embed_dim
    p: nn.Params = {}
    nn.add_linear(p, f"{prefix}.patch_embed.fc1", cfg.input_dim, E, rng)
    nn.add_linear(p, f"{prefix}.patch_embed.fc2", E, E, rng)
    p[f"{prefix}.cls_token"] = Tensor(nn.trunc_normal(rng, (E,), 0.02), requires_grad=True)
    p[f"{prefix}.mask_token"] = Tensor(np.zeros(E), requires_grad=True)
    for i in range(cfg.layers):
        b = f"{prefix}.blocks.{i}"
        nn.add_norm(p, f"{b}.norm1", E)
        nn.add_linear(p, f"{b}.attn.qkv", E, 3 * E, rng)
        nn.add_linear(p, f"{b}.attn.proj", E, E, rng)
        nn.add_norm(p, f"{b}.norm2", E)
        nn.add_linear(p, f"{b}.mlp.fc1", E, cfg.mlp_hidden, rng)
        nn.add_linear(p, f"{b}.mlp.fc2", cfg.mlp_hidden, E, rng)
    nn.add_norm(p, f"{prefix}.norm", E)
    return p


# -- positional biases --------------------------------------------------------

def head_slopes(n_heads: int) -> np.ndarray:
    """Geometric per-head slopes m_h = 2^(-8h/H), h = 1..H."""
    if n_heads < 1:
        raise ConfigError("need at least one head")
    h = np.arange(1, n_heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / n_heads)


def pairwise_distance(coords_q: np.ndarray, coords_k: np.ndarray) -> np.ndarray:
    cq = np.asarray(coords_q, dtype=np.float64)
    ck = np.asarray(coords_k, dtype=np.float64)
    diff = cq[..., :, None, :] - ck[..., None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def alibi_bias(coords_q: np.ndarray, coords_k: np.ndarray, slope: float) -> np.ndarray:
    """bias[i, j] = -slope * ||coord_i - coord_j||_2."""
    return -float(slope) * pairwise_distance(coords_q, coords_k)


def _with_cls(x: np.ndarray) -> np.ndarray:
    """Pad the last two axes with a leading zero row/column for the CLS token."""
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)]
    return np.pad(x, pad)


def attention_bias(coords: np.ndarray, key_mask: np.ndarray, cfg: EncoderConfig,
                   slopes: np.ndarray | None = None) -> np.ndarray:
    """Additive attention bias of shape (B, H, N+1, N+1) for CLS + N tokens.

    Combines per-head ALiBi (zero to and from CLS) with -inf on masked keys.
    """
    B, N = key_mask.shape
    allowed = np.concatenate([np.ones((B, 1), dtype=bool), key_mask], axis=1)
    mask_bias = np.where(allowed, 0.0, -np.inf)[:, None, None, :]
    if cfg.pos_encoding == "alibi":
        m = head_slopes(cfg.heads) if slopes is None else np.asarray(slopes, dtype=np.float64)
        dist = _with_cls(pairwise_distance(coords, coords))  # (B, N+1, N+1)
        return -m[None, :, None, None] * dist[:, None] + mask_bias
    return np.broadcast_to(mask_bias, (B, 1, N + 1, N + 1)).copy()


def sincos_2d(coords: np.ndarray, dim: int) -> np.ndarray:
    """Fixed 2D sinusoidal embedding: half the channels encode row, half column."""
    if dim % 4:
        raise ConfigError("absolute encoding needs embed_dim divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (np.arange(quarter) / quarter))
    parts = []
    for axis in (0, 1):
        ang = coords[..., axis:axis + 1].astype(np.float64) * freqs
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=-1)


def rotary_tables(coords: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """cos/sin tables (B, 1, N+1, hd) and the rotate-half matrix; CLS is unrotated."""
    half = head_dim // 2
    quarter = half // 2
    freqs = 1.0 / (10000 ** (np.arange(quarter) / quarter))
    angs = []
    for axis in (0, 1):
        a = coords[..., axis:axis + 1].astype(np.float64) * freqs  # (B, N, quarter)
        angs.append(np.concatenate([a, a], axis=-1))
    ang = np.concatenate(angs, axis=-1)  # (B, N, hd)
    ang = np.pad(ang, [(0, 0), (1, 0), (0, 0)])
    rot = np.zeros((head_dim, head_dim))
    for block in (0, half):
        for i in range(quarter):
            # rotate_half within each block: (x1, x2) -> (-x2, x1)
            rot[block + quarter + i, block + i] = -1.0
            rot[block + i, block + quarter + i] = 1.0
    return np.cos(ang)[:, None], np.sin(ang)[:, None], rot


# -- attention ----------------------------------------------------------------

def scaled_attention(q, k, v, bias: np.ndarray | None):
    """softmax(q k^T / sqrt(d) + bias) v over the last two axes."""
    return T.fused_attention(q, k, v, bias, 1.0 / math.sqrt(q.shape[-1]))


def attention(q, k, v, coords: np.ndarray, slope: float, attn_mask: np.ndarray | None = None):
    """Single-head 2D-ALiBi attention over N tokens (no CLS handling)."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    bias = alibi_bias(coords, coords, slope)
    if attn_mask is not None:
        attn_mask = np.asarray(attn_mask, dtype=bool)
        if not attn_mask.any():
            raise DataError("every key is masked; attention row would be empty")
        bias = bias + np.where(attn_mask, 0.0, -np.inf)[None, :]
    return scaled_attention(q, k, v, bias)


def _attention_block(params, name, x, cfg: EncoderConfig, bias, rope):
    B, N1, E = x.shape
    H, hd = cfg.heads, cfg.head_dim
    qkv = nn.apply_linear(params, f"{name}.qkv", x).reshape(B, N1, 3, H, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if rope is not None:
        cos, sin, rot = rope
        q = q * cos + matmul(q, rot) * sin
        k = k * cos + matmul(k, rot) * sin
    ctx = scaled_attention(q, k, v, bias)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, N1, E)
    return nn.apply_linear(params, f"{name}.proj", ctx)


def _drop_path(branch, rate: float, rng: np.random.Generator | None):
    if rate <= 0.0 or rng is None:
        return branch
    keep = 1.0 - rate
    B = branch.shape[0]
    m = ((rng.random(B) < keep) / keep).astype(branch.dtype)
    return branch * m.reshape((B,) + (1,) * (branch.ndim - 1))


def forward(params: nn.Params, cfg: EncoderConfig, feats, coords: np.ndarray, key_mask: np.ndarray,
            token_mask: np.ndarray | None = None, train: bool = False, rng: np.random.Generator | None = None,
            prefix: str = "enc", raw: bool = False, slopes: np.ndarray | None = None):
    """Batched encoder pass.

    feats (B, N, input_dim), coords (B, N, 2), key_mask (B, N) True on tissue.
    ``token_mask`` marks tokens to replace by the learned mask embedding.
    Returns a Tensor (B, N+1, E) with the CLS output at index 0, after the
    final norm unless ``raw``.
    """
    dt = params[f"{prefix}.cls_token"].data.dtype
    if not isinstance(feats, Tensor):
        feats = Tensor(np.asarray(feats, dtype=dt))
    B, N, _ = feats.shape
    if feats.shape[-1] != cfg.input_dim:
        raise DataError(f"feature dim {feats.shape[-1]} != encoder input_dim {cfg.input_dim}")
    E = cfg.embed_dim
    x = nn.apply_mlp(params, f"{prefix}.patch_embed", feats)
    if token_mask is not None:
        m = np.asarray(token_mask, dtype=dt)[..., None]
        x = x * (1.0 - m) + params[f"{prefix}.mask_token"] * m
    if cfg.pos_encoding == "absolute":
        x = x + sincos_2d(np.asarray(coords), E).astype(dt)
    cls = params[f"{prefix}.cls_token"].reshape(1, 1, E) + np.zeros((B, 1, E), dtype=dt)
    x = concat([cls, x], axis=1)
    bias = attention_bias(np.asarray(coords), np.asarray(key_mask, dtype=bool), cfg, slopes).astype(dt)
    rope = rotary_tables(np.asarray(coords), cfg.head_dim) if cfg.pos_encoding == "rotary" else None
    if rope is not None:
        rope = tuple(a.astype(dt) for a in rope)
    dpr = np.linspace(0.0, cfg.drop_path_rate, cfg.layers) if train else np.zeros(cfg.layers)
    for i in range(cfg.layers):
        b = f"{prefix}.blocks.{i}"
        h = _attention_block(params, f"{b}.attn", nn.apply_norm(params, f"{b}.norm1", x, cfg.ln_eps), cfg, bias, rope)
        x = x + _drop_path(h, dpr[i], rng)
        h = nn.apply_mlp(params, f"{b}.mlp", nn.apply_norm(params, f"{b}.norm2", x, cfg.ln_eps))
        x = x + _drop_path(h, dpr[i], rng)
    if raw:
        return x
    return nn.apply_norm(params, f"{prefix}.norm", x, cfg.ln_eps)


def encode_tokens(feats: np.ndarray, coords: np.ndarray, mask: np.ndarray, params: nn.Params,
                  cfg: EncoderConfig, mode: str = "eval", rng: np.random.Generator | None = None,
                  raw: bool = False, prefix: str = "enc") -> tuple[np.ndarray, np.ndarray]:
    """Encode N tokens; returns (cls (E,), tokens (N+1, E)).

    Background tokens take no part in attention, so they are dropped before
    the pass and their output rows are left at zero.
    """
    if mode not in ("eval", "train"):
        raise ConfigError(f"mode must be 'eval' or 'train', got {mode!r}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("no tissue tokens to encode")
    keep = np.flatnonzero(mask)
    with no_grad():
        out = forward(params, cfg, feats[keep][None], coords[keep][None], np.ones((1, keep.size), bool),
                      train=(mode == "train"), rng=rng, prefix=prefix, raw=raw).data[0]
    tokens = np.zeros((len(mask) + 1, cfg.embed_dim))
    tokens[0] = out[0]
    tokens[1 + keep] = out[1:]
    return tokens[0].copy(), tokens


def encode(source: CropView | FeatureGrid, params: nn.Params, cfg: EncoderConfig, mode: str = "eval",
           rng: np.random.Generator | None = None, raw: bool = False) -> tuple[np.ndarray, np.ndarray]:
    view = source.as_view() if isinstance(source, FeatureGrid) else source
    feats, coords, mask = view.tokens()
    return encode_tokens(feats, coords, mask, params, cfg, mode, rng, raw)


def mean_pool_baseline(grid: FeatureGrid, slide_id: str = "") -> SlideEmbedding:
    if not grid.mask.any():
        raise DataError("no tissue cells to average")
    return SlideEmbedding(grid.features[grid.mask].mean(axis=0), "mean", slide_id, "baseline")
