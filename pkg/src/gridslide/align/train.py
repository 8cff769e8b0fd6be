"""Stage-2 (captions) and Stage-3 (reports) contrastive-captioner training."""
from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from gridslide import nn
from gridslide._io import atomic_write_text
from gridslide.align import model as A
from gridslide.align.beam import Hypothesis, beam_search
from gridslide.encoder import EncoderConfig, forward
from gridslide.errors import ConfigError, DataError, NumericalError
from gridslide.feature_grid import CropView, FeatureGrid, sample_region_crop
from gridslide.numerics import (
    OptimizerState,
    Schedule,
    Tensor,
    adamw_step,
    backward,
    log_softmax,
    no_grad,
)
from gridslide.rng import stream
from gridslide.text import Vocab

log = logging.getLogger(__name__)

STAGE3_CROP = 64
MAX_LOGIT_SCALE = math.log(100.0)


@dataclass
class AlignConfig:
    stage: int = 2
    batch_size: int = 1568
    grad_accum: int = 2
    vision_lr: float = 5e-6
    other_lr: float = 5e-5
    vision_wd: float = 1e-6
    other_wd: float = 5e-5
    vision_warmup: int = 600
    other_warmup: int = 200
    epochs: int = 10
    crop_side: int = 0  # 0 = use the grid as given
    temperature_init: float = 0.07
    betas: tuple[float, float] = (0.9, 0.999)
    drop_path: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.stage not in (2, 3):
            raise ConfigError("stage must be 2 or 3")
        for name in ("batch_size", "grad_accum", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("vision_lr", "other_lr", "temperature_init"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.vision_wd < 0 or self.other_wd < 0 or self.vision_warmup < 0 or self.other_warmup < 0:
            raise ConfigError("weight decay and warmup must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def stage2(cls, **kw) -> "AlignConfig":
        return cls(**{**dict(stage=2), **kw})

    @classmethod
    def stage3(cls, **kw) -> "AlignConfig":
        base = dict(stage=3, batch_size=128, grad_accum=2, vision_lr=5e-5, other_lr=5e-5, vision_wd=1e-5,
                    other_wd=5e-5, vision_warmup=1800, other_warmup=200, epochs=5, crop_side=STAGE3_CROP)
        return cls(**{**base, **kw})

    @classmethod
    def desk(cls, stage: int = 2, **kw) -> "AlignConfig":
        """Settings that train in minutes on a few hundred synthetic pairs."""
        base = dict(batch_size=16, grad_accum=1, vision_lr=1e-4, other_lr=1e-3, vision_warmup=10, other_warmup=10,
                    epochs=20)
        if stage == 3:
            base.update(batch_size=16, epochs=5, vision_lr=5e-5)
            return cls.stage3(**{**base, **kw})
        return cls.stage2(**{**base, **kw})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Pair:
    slide_id: str
    view: CropView | FeatureGrid
    texts: list[str]
    label: int = -1


@dataclass
class AlignResult:
    params: nn.Params
    text_cfg: A.TextConfig
    vocab: Vocab
    trace: list[dict] = field(default_factory=list)


def is_vision(name: str) -> bool:
    return name.startswith("enc.")


def crop_at_most(grid: FeatureGrid | CropView, side: int, rng: np.random.Generator) -> CropView:
    """The whole grid when it fits in side x side, else a random side x side
    window holding at least one tissue cell."""
    view = grid.as_view() if isinstance(grid, FeatureGrid) else grid
    H, W = view.shape
    if side <= 0 or (H <= side and W <= side):
        return view
    if isinstance(grid, CropView):
        grid = FeatureGrid(grid.features, grid.mask)
    return sample_region_crop(grid, side, rng)


def batch_views(views: Sequence[CropView], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tissue tokens of each view padded to a common length (padding masked out)."""
    toks = [v.tokens() for v in views]
    keep = [np.flatnonzero(m) for _, _, m in toks]
    N = max(k.size for k in keep)
    D = toks[0][0].shape[1]
    feats = np.zeros((len(views), N, D), dtype=dtype)
    coords = np.zeros((len(views), N, 2))
    mask = np.zeros((len(views), N), dtype=bool)
    for i, ((f, c, _), k) in enumerate(zip(toks, keep)):
        feats[i, : k.size] = f[k]
        coords[i, : k.size] = c[k]
        mask[i, : k.size] = True
    return feats, coords, mask


def encode_text_ids(vocab: Vocab, texts: Sequence[str], max_len: int) -> list[list[int]]:
    out = []
    for t in texts:
        full = vocab.encode(t)
        if len(full) > max_len:
            warnings.warn(f"caption of {len(full)} tokens truncated to {max_len}", RuntimeWarning, stacklevel=2)
        out.append(vocab.encode(t, max_len=max_len))
    return out


def vision_tokens(params, enc_cfg: EncoderConfig, views: Sequence[CropView], train: bool, rng):
    dt = params["enc.cls_token"].data.dtype
    feats, coords, mask = batch_views(views, dt)
    out = forward(params, enc_cfg, feats, coords, mask, train=train, rng=rng if train else None)
    full_mask = np.concatenate([np.ones((len(views), 1), bool), mask], axis=1)
    return out, full_mask


def image_side(params, enc_cfg: EncoderConfig, text_cfg: A.TextConfig, views, train=False, rng=None):
    """Returns (normalized contrastive embedding (B, E), reconstruction tokens (B, n_recon, E))."""
    tokens, mask = vision_tokens(params, enc_cfg, views, train, rng)
    pooled = A.attentional_pool(params, "pool.contrast", tokens, mask, text_cfg.heads)
    recon = A.attentional_pool(params, "pool.recon", tokens, mask, text_cfg.heads)
    return A.unit(A.image_embedding(params, pooled)), recon


def text_side(params, text_cfg: A.TextConfig, ids: np.ndarray, mask: np.ndarray):
    hidden = A.text_forward(params, text_cfg, ids, mask)
    return A.unit(A.text_embedding(params, text_cfg, hidden, mask)), hidden


def batch_loss(params, enc_cfg, text_cfg, vocab, pairs: Sequence[Pair], cfg: AlignConfig, rng):
    views = [crop_at_most(p.view, cfg.crop_side, rng) for p in pairs]
    texts = [p.texts[int(rng.integers(len(p.texts)))] for p in pairs]
    ids, mask = A.pad_batch(encode_text_ids(vocab, texts, text_cfg.max_len), vocab.pad_id)
    img, recon = image_side(params, enc_cfg, text_cfg, views, train=cfg.drop_path, rng=rng)
    txt, hidden = text_side(params, text_cfg, ids, mask)
    con = A.contrastive_loss(img, txt, A.temperature(params))
    cap = A.caption_loss(A.decoder_logits(params, text_cfg, hidden, recon, mask), ids, mask)
    return con, cap


def _schedules(cfg: AlignConfig, total: int) -> dict[str, Schedule]:
    return {
        "vision": Schedule.warmup_cosine(0.0, cfg.vision_lr, 0.0, min(cfg.vision_warmup, total), total),
        "other": Schedule.warmup_cosine(0.0, cfg.other_lr, 0.0, min(cfg.other_warmup, total), total),
    }


def align_train(pairs: Sequence[Pair], cfg: AlignConfig, enc_cfg: EncoderConfig, student: nn.Params,
                vocab: Vocab, text_cfg: A.TextConfig | None = None, seed: int = 0,
                init: nn.Params | None = None) -> AlignResult:
    """Train the slide encoder (initialised from ``student``) with the text
    stack; ``init`` continues from a previous stage's aligned parameters."""
    if len(pairs) < 2:
        raise DataError("alignment needs at least two pairs")
    text_cfg = text_cfg or A.TextConfig(len(vocab), width=enc_cfg.embed_dim, heads=enc_cfg.heads)
    if init is not None:
        params = {k: Tensor(v.data.astype(cfg.dtype), requires_grad=True) for k, v in init.items()}
    else:
        params = {k: Tensor(v.data.astype(cfg.dtype), requires_grad=True)
                  for k, v in nn.subset(student, "enc.").items()}
        extra = A.init_align(text_cfg, stream(seed, "align_init"), enc_cfg.embed_dim)
        extra["logit_scale"] = Tensor(np.array([math.log(1.0 / cfg.temperature_init)]), requires_grad=True)
        params.update({k: Tensor(v.data.astype(cfg.dtype), requires_grad=True) for k, v in extra.items()})
    groups = {g: {k: p for k, p in params.items() if is_vision(k) == (g == "vision")} for g in ("vision", "other")}
    states = {g: OptimizerState.init(ps, cfg.betas) for g, ps in groups.items()}
    wd = {"vision": cfg.vision_wd, "other": cfg.other_wd}
    per_step = cfg.batch_size * cfg.grad_accum
    steps_per_epoch = math.ceil(len(pairs) / per_step)
    scheds = _schedules(cfg, cfg.epochs * steps_per_epoch)
    res = AlignResult(params, text_cfg, vocab)
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(seed, "align_shuffle", cfg.stage, epoch).permutation(len(pairs))
        rng = stream(seed, "align_step", cfg.stage, epoch)
        for start in range(0, len(pairs), per_step):
            chunk = order[start:start + per_step]
            micro = [chunk[i:i + cfg.batch_size] for i in range(0, len(chunk), cfg.batch_size)]
            micro = [m for m in micro if len(m) >= 2] or [chunk]
            for p in params.values():
                p.grad = None
            con_sum = cap_sum = 0.0
            for m in micro:
                con, cap = batch_loss(params, enc_cfg, text_cfg, vocab, [pairs[i] for i in m], cfg, rng)
                total = (con + cap) * (1.0 / len(micro))
                if not math.isfinite(float(total.data)):
                    raise NumericalError(f"non-finite alignment loss at step {step}")
                backward(total)
                con_sum += float(con.data) / len(micro)
                cap_sum += float(cap.data) / len(micro)
            lrs = {g: s(step) for g, s in scheds.items()}
            for g, ps in groups.items():
                grads = {k: p.grad for k, p in ps.items()}
                decay = {k: (wd[g] if k != "logit_scale" else 0.0) for k in ps}
                adamw_step(ps, grads, states[g], lrs[g], decay)
            ls = params["logit_scale"].data
            np.clip(ls, 0.0, MAX_LOGIT_SCALE, out=ls)
            res.trace.append({"step": step, "epoch": epoch, "contrastive": con_sum, "caption": cap_sum,
                              "tau": float(np.exp(-ls[0])), "lr_vision": lrs["vision"], "lr_other": lrs["other"]})
            step += 1
        log.info("stage %d epoch %d contrastive %.4f caption %.4f", cfg.stage, epoch, con_sum, cap_sum)
    return res


# -- inference helpers --------------------------------------------------------------

def embed_slides(params, enc_cfg: EncoderConfig, text_cfg: A.TextConfig, views: Sequence[CropView | FeatureGrid],
                 batch: int = 8) -> np.ndarray:
    """Normalized contrastive slide embeddings (N, E) as float64."""
    vs = [v.as_view() if isinstance(v, FeatureGrid) else v for v in views]
    out = []
    with no_grad():
        for i in range(0, len(vs), batch):
            emb, _ = image_side(params, enc_cfg, text_cfg, vs[i:i + batch])
            out.append(emb.data.astype(np.float64))
    return np.concatenate(out)


def embed_texts(params, text_cfg: A.TextConfig, vocab: Vocab, texts: Sequence[str], batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(texts), batch):
            ids, mask = A.pad_batch(encode_text_ids(vocab, texts[i:i + batch], text_cfg.max_len), vocab.pad_id)
            emb, _ = text_side(params, text_cfg, ids, mask)
            out.append(emb.data.astype(np.float64))
    return np.concatenate(out)


def decoder_step_fn(params, text_cfg: A.TextConfig, recon: np.ndarray):
    """Next-token log-prob function for one slide's reconstruction tokens (n_recon, E)."""
    recon = np.asarray(recon)

    def step(prefixes: list[list[int]]) -> np.ndarray:
        ids = np.asarray(prefixes, dtype=np.int64)
        with no_grad():
            hidden = A.text_forward(params, text_cfg, ids)
            ctx = np.broadcast_to(recon, (ids.shape[0],) + recon.shape)
            logits = A.decoder_logits(params, text_cfg, hidden, Tensor(np.ascontiguousarray(ctx)))
            return log_softmax(logits[:, -1], axis=-1).data.astype(np.float64)

    return step


def generate_reports(params, enc_cfg: EncoderConfig, text_cfg: A.TextConfig, vocab: Vocab,
                     views: Sequence[CropView | FeatureGrid], beams: int = 5, max_len: int = 128) -> list[str]:
    """Beam-decoded report text per slide (one beam group)."""
    out = []
    for v in views:
        view = v.as_view() if isinstance(v, FeatureGrid) else v
        with no_grad():
            _, recon = image_side(params, enc_cfg, text_cfg, [view])
        hyp: Hypothesis = beam_search(decoder_step_fn(params, text_cfg, recon.data[0]), vocab.bos_id, vocab.eos_id,
                                      beams, min(max_len, text_cfg.max_len - 1))
        out.append(vocab.decode(hyp.tokens))
    return out


# -- caption corpus file ----------------------------------------------------------------

def write_captions(path: str | os.PathLike, rows: Sequence[tuple[str, int, str]]) -> None:
    lines = []
    for sid, variant, text in rows:
        if "\t" in text or "\n" in text:
            raise DataError("caption text may not contain tabs or newlines")
        lines.append(f"{sid}\t{int(variant)}\t{text}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_captions(path: str | os.PathLike) -> dict[str, list[str]]:
    """slide id -> texts ordered by variant index."""
    rows: dict[str, dict[int, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{n}: expected 3 tab-separated fields")
            sid, variant, text = parts
            rows.setdefault(sid, {})[int(variant)] = text
    return {sid: [v[i] for i in sorted(v)] for sid, v in rows.items()}
