"""Attentional poolers, causal text encoder, multimodal decoder and the two losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from gridslide import nn
from gridslide.errors import ConfigError, DataError, ShapeError
from gridslide.numerics import Tensor, as_tensor, fused_attention, l2_normalize, log_softmax
from gridslide.numerics import tensor as T

MAX_LEN = 128
N_RECON = 128
N_CONTRAST = 1


@dataclass
class TextConfig:
    vocab_size: int
    width: int = 64
    heads: int = 4
    text_layers: int = 2
    decoder_layers: int = 2
    mlp_hidden: int = 256
    max_len: int = MAX_LEN
    n_recon: int = N_RECON
    n_contrast: int = N_CONTRAST
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if not 1 <= self.max_len <= MAX_LEN:
            raise ConfigError(f"max_len must lie in [1, {MAX_LEN}]")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @classmethod
    def full(cls, vocab_size: int) -> "TextConfig":
        return cls(vocab_size, width=768, heads=12, text_layers=12, decoder_layers=12, mlp_hidden=3072)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- shared attention pieces -------------------------------------------------------

def _heads(x, B, L, H, hd):
    return x.reshape(B, L, H, hd).transpose(0, 2, 1, 3)


def _merge(x, B, L, E):
    return x.transpose(0, 2, 1, 3).reshape(B, L, E)


def self_attention(params, name, x, heads: int, bias: np.ndarray | None):
    B, L, E = x.shape
    hd = E // heads
    qkv = nn.apply_linear(params, f"{name}.qkv", x).reshape(B, L, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    ctx = fused_attention(qkv[0], qkv[1], qkv[2], bias, 1.0 / math.sqrt(hd))
    return nn.apply_linear(params, f"{name}.proj", _merge(ctx, B, L, E))


def cross_attention(params, name, x, context, heads: int, bias: np.ndarray | None = None):
    """Queries from ``x`` (B, Lq, E), keys/values from ``context`` (B, Lk, E)."""
    B, Lq, E = x.shape
    Lk = context.shape[1]
    hd = E // heads
    q = _heads(nn.apply_linear(params, f"{name}.q", x), B, Lq, heads, hd)
    kv = nn.apply_linear(params, f"{name}.kv", context).reshape(B, Lk, 2, heads, hd).transpose(2, 0, 3, 1, 4)
    ctx = fused_attention(q, kv[0], kv[1], bias, 1.0 / math.sqrt(hd))
    return nn.apply_linear(params, f"{name}.proj", _merge(ctx, B, Lq, E))


def _add_cross(params, name, E, rng):
    nn.add_linear(params, f"{name}.q", E, E, rng)
    nn.add_linear(params, f"{name}.kv", E, 2 * E, rng)
    nn.add_linear(params, f"{name}.proj", E, E, rng)


def key_bias(key_mask: np.ndarray, dtype) -> np.ndarray:
    """(B, 1, 1, N) additive bias: 0 on valid keys, -inf elsewhere."""
    km = np.asarray(key_mask, dtype=bool)
    if not km.any(axis=1).all():
        raise DataError("a sequence has no valid key")
    return np.where(km, 0.0, -np.inf).astype(dtype)[:, None, None, :]


def causal_bias(L: int, key_mask: np.ndarray | None, dtype) -> np.ndarray:
    b = np.triu(np.full((L, L), -np.inf), k=1)[None, None]
    if key_mask is not None:
        b = b + np.where(np.asarray(key_mask, bool), 0.0, -np.inf)[:, None, None, :]
        # a padded query row may see nothing but itself masked; let it see position 0
        b[..., 0] = np.where(np.isneginf(b[..., 0]), 0.0, b[..., 0])
    return b.astype(dtype)


# -- poolers ----------------------------------------------------------------------

def init_pooler(params: nn.Params, name: str, n_queries: int, width: int, rng: np.random.Generator) -> None:
    if n_queries not in (N_CONTRAST, N_RECON) and n_queries < 1:
        raise ConfigError("n_queries must be >= 1")
    params[f"{name}.queries"] = Tensor(nn.trunc_normal(rng, (n_queries, width)), requires_grad=True)
    nn.add_norm(params, f"{name}.norm_kv", width)
    _add_cross(params, f"{name}.attn", width, rng)
    nn.add_norm(params, f"{name}.norm_out", width)


def attentional_pool(params: nn.Params, name: str, tokens, key_mask: np.ndarray | None, heads: int,
                     eps: float = 1e-6):
    """Learned queries cross-attend over (B, N, E) tokens -> (B, n_queries, E)."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[1] < 1:
        raise ShapeError("pooling needs a (B, N>=1, E) token tensor")
    B, N, E = tokens.shape
    queries = params[f"{name}.queries"]
    q = queries.reshape(1, *queries.shape) + np.zeros((B, 1, 1), dtype=tokens.dtype)
    ctx = nn.apply_norm(params, f"{name}.norm_kv", tokens, eps)
    bias = key_bias(key_mask, tokens.dtype) if key_mask is not None else None
    out = cross_attention(params, f"{name}.attn", q, ctx, heads, bias)
    return nn.apply_norm(params, f"{name}.norm_out", out, eps)


# -- text tower ----------------------------------------------------------------------

def _add_block(params, name, E, hidden, rng, cross: bool):
    nn.add_norm(params, f"{name}.norm1", E)
    nn.add_linear(params, f"{name}.attn.qkv", E, 3 * E, rng)
    nn.add_linear(params, f"{name}.attn.proj", E, E, rng)
    if cross:
        nn.add_norm(params, f"{name}.norm_x", E)
        _add_cross(params, f"{name}.xattn", E, rng)
    nn.add_norm(params, f"{name}.norm2", E)
    nn.add_linear(params, f"{name}.mlp.fc1", E, hidden, rng)
    nn.add_linear(params, f"{name}.mlp.fc2", hidden, E, rng)


def init_align(cfg: TextConfig, rng: np.random.Generator, vision_width: int) -> nn.Params:
    """Parameters of every Stage-2/3 component except the slide encoder."""
    E = cfg.width
    if vision_width != E:
        raise ConfigError(f"text width {E} must equal the slide encoder width {vision_width}")
    p: nn.Params = {}
    init_pooler(p, "pool.contrast", cfg.n_contrast, E, rng)
    init_pooler(p, "pool.recon", cfg.n_recon, E, rng)
    nn.add_linear(p, "img.proj", E, E, rng)
    p["text.tok_embed"] = Tensor(nn.trunc_normal(rng, (cfg.vocab_size, E)), requires_grad=True)
    p["text.pos_embed"] = Tensor(nn.trunc_normal(rng, (cfg.max_len, E), std=0.01), requires_grad=True)
    for i in range(cfg.text_layers):
        _add_block(p, f"text.blocks.{i}", E, cfg.mlp_hidden, rng, cross=False)
    nn.add_norm(p, "text.norm", E)
    nn.add_linear(p, "text.proj", E, E, rng)
    for i in range(cfg.decoder_layers):
        _add_block(p, f"dec.blocks.{i}", E, cfg.mlp_hidden, rng, cross=True)
    nn.add_norm(p, "dec.norm", E)
    nn.add_linear(p, "dec.head", E, cfg.vocab_size, rng)
    p["logit_scale"] = Tensor(np.array([math.log(1 / 0.07)]), requires_grad=True)
    return p


def _block(params, name, x, cfg: TextConfig, bias, context=None):
    h = self_attention(params, f"{name}.attn", nn.apply_norm(params, f"{name}.norm1", x, cfg.ln_eps), cfg.heads, bias)
    x = x + h
    if context is not None:
        x = x + cross_attention(params, f"{name}.xattn", nn.apply_norm(params, f"{name}.norm_x", x, cfg.ln_eps),
                                context, cfg.heads)
    h = nn.apply_mlp(params, f"{name}.mlp", nn.apply_norm(params, f"{name}.norm2", x, cfg.ln_eps))
    return x + h


def pad_batch(seqs: list[list[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def text_forward(params: nn.Params, cfg: TextConfig, ids: np.ndarray, mask: np.ndarray | None = None):
    """Causal unimodal text encoder; returns (B, L, E) after the final norm."""
    ids = np.asarray(ids, dtype=np.int64)
    B, L = ids.shape
    if L > cfg.max_len:
        raise ShapeError(f"sequence length {L} exceeds {cfg.max_len}")
    if L < 1:
        raise DataError("empty caption")
    if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
        raise DataError("token id outside the vocabulary")
    emb = params["text.tok_embed"]
    x = emb[ids] + params["text.pos_embed"][np.arange(L)]
    bias = causal_bias(L, mask, emb.dtype)
    for i in range(cfg.text_layers):
        x = _block(params, f"text.blocks.{i}", x, cfg, bias)
    return nn.apply_norm(params, "text.norm", x, cfg.ln_eps)


def text_embedding(params: nn.Params, cfg: TextConfig, hidden, mask: np.ndarray):
    """Projected output at each sequence's last real position (the end token)."""
    last = np.asarray(mask, bool).sum(axis=1) - 1
    pooled = hidden[np.arange(hidden.shape[0]), last]
    return nn.apply_linear(params, "text.proj", pooled)


def decoder_logits(params: nn.Params, cfg: TextConfig, text_hidden, recon_tokens, mask: np.ndarray | None = None):
    """Multimodal decoder over unimodal text states, cross-attending to the
    reconstruction tokens; returns next-token logits (B, L, V)."""
    B, L, _ = text_hidden.shape
    bias = causal_bias(L, mask, text_hidden.dtype)
    x = text_hidden
    for i in range(cfg.decoder_layers):
        x = _block(params, f"dec.blocks.{i}", x, cfg, bias, context=recon_tokens)
    return nn.apply_linear(params, "dec.head", nn.apply_norm(params, "dec.norm", x, cfg.ln_eps))


def image_embedding(params: nn.Params, pooled):
    """(B, 1, E) contrastive pooler output -> projected (B, E)."""
    return nn.apply_linear(params, "img.proj", pooled[:, 0])


# -- losses ----------------------------------------------------------------------------

def contrastive_loss(img, txt, temperature):
    """Symmetric InfoNCE over the B x B cosine-similarity / tau matrix.

    ``img``/``txt`` are L2-normalized (B, E); ``temperature`` is a positive
    float or a Tensor holding tau.
    """
    img, txt = as_tensor(img), as_tensor(txt)
    if img.shape != txt.shape or img.ndim != 2:
        raise ShapeError("image and text embeddings must both be (B, E)")
    tau_val = float(np.asarray(temperature.data if isinstance(temperature, Tensor) else temperature).reshape(-1)[0])
    if not tau_val > 0:
        raise ConfigError("temperature must be > 0")
    B = img.shape[0]
    sims = img @ txt.T
    logits = sims / temperature if isinstance(temperature, Tensor) else sims * (1.0 / tau_val)
    eye = np.eye(B, dtype=img.dtype)
    i2t = -(log_softmax(logits, axis=1) * eye).sum() * (1.0 / B)
    t2i = -(log_softmax(logits, axis=0) * eye).sum() * (1.0 / B)
    return (i2t + t2i) * 0.5


def caption_loss(logits, ids: np.ndarray, mask: np.ndarray):
    """Teacher-forced next-token CE: logits[:, t] predicts ids[:, t+1];
    padded targets are excluded from the mean."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.shape[1] < 2:
        raise DataError("caption needs at least two tokens (start and end)")
    target = ids[:, 1:]
    w = mask[:, 1:].astype(logits.dtype)
    n = w.sum()
    if n == 0:
        raise DataError("empty caption")
    lp = log_softmax(logits[:, :-1], axis=-1)
    B, Lm1, V = lp.shape
    onehot = np.zeros((B, Lm1, V), dtype=logits.dtype)
    onehot[np.arange(B)[:, None], np.arange(Lm1)[None, :], target] = 1.0
    return -(lp * (onehot * w[..., None])).sum() * (1.0 / n)


def temperature(params: nn.Params):
    """tau = exp(-logit_scale) as a differentiable Tensor of shape (1,)."""
    return T.exp(-params["logit_scale"])


def unit(x):
    return l2_normalize(x, axis=-1)
