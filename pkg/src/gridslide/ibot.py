"""Stage-1 self-distillation with masked feature modeling.

A student encoder sees 2 global and 10 local crops (globals partially
replaced by the mask embedding); an EMA teacher sees the unmasked globals.
The loss distills teacher CLS distributions into every other student view
and teacher patch distributions into the student's masked tokens.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from gridslide import nn
from gridslide.encoder import EncoderConfig, forward, init_encoder
from gridslide.errors import ConfigError, DataError, NumericalError
from gridslide.feature_grid import (
    CropView,
    FeatureGrid,
    group_tissue,
    random_augment,
    sample_region_crop,
    sample_views,
)
from gridslide.numerics import (
    OptimizerState,
    Schedule,
    Tensor,
    adamw_step,
    as_tensor,
    backward,
    clip_grad_norm,
    concat,
    ema_update,
    gelu,
    l2_normalize,
    log_softmax,
    matmul,
    no_grad,
)
from gridslide.rng import stream

log = logging.getLogger(__name__)


@dataclass
class IbotConfig:
    prototype_dim: int = 1024
    head_hidden: int = 2048
    head_bottleneck: int = 256
    mask_ratio: float = 0.3
    mask_ratio_var: float = 0.2
    mask_shape: str = "block"
    teacher_temp_start: float = 0.04
    teacher_temp_final: float = 0.07
    warmup_teacher_temp_epochs: int = 90
    student_temp: float = 0.1
    momentum_start: float = 0.996
    momentum_final: float = 1.0
    center_momentum: float = 0.9
    freeze_last_layer_epochs: int = 3
    shared_head: bool = True
    epochs: int = 300
    batch_size: int = 1024
    lr_start: float = 0.0
    lr_peak: float = 5e-4
    lr_final: float = 1e-6
    warmup_epochs: int = 30
    wd_start: float = 0.04
    wd_final: float = 0.4
    clip_grad: float = 3.0
    betas: tuple[float, float] = (0.9, 0.999)
    n_global: int = 2
    n_local: int = 10
    region_size: int = 16
    global_size: int = 14
    local_size: int = 6
    min_group_patches: int = 16
    p_flip: float = 0.5
    posterize_bits: int = 5
    p_posterize: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.mask_ratio_var < 0:
            raise ConfigError("mask_ratio_var must be >= 0")
        if self.student_temp <= 0 or self.teacher_temp_start <= 0 or self.teacher_temp_final <= 0:
            raise ConfigError("temperatures must be > 0")
        if self.mask_shape != "block":
            raise ConfigError("only block masking is implemented")
        if not self.shared_head:
            raise ConfigError("only the shared CLS/patch head is implemented")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs exceeds epochs")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be positive")

    @classmethod
    def desk(cls, **kw) -> "IbotConfig":
        base = dict(prototype_dim=1024, head_hidden=256, head_bottleneck=64, epochs=30, batch_size=16,
                    warmup_epochs=3, warmup_teacher_temp_epochs=9, freeze_last_layer_epochs=1,
                    lr_peak=2e-3)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- masking ------------------------------------------------------------------

def mask_blocks(tissue: np.ndarray | CropView, ratio: float, variance: float, rng: np.random.Generator,
                min_block: int = 4, aspect: float = 0.3, return_rects: bool = False):
    """Block-wise mask over an (S, S) token grid.

    The target fraction is drawn from [ratio(1-var), ratio(1+var)]; random
    rectangles (log-uniform aspect) are added until the number of masked
    tissue tokens reaches round(fraction * n_tissue). If no rectangle fits
    the remaining budget, single cells top up the count. Background is never
    masked.
    """
    tissue = np.asarray(tissue.mask if isinstance(tissue, CropView) else tissue, dtype=bool)
    H, W = tissue.shape
    mask = np.zeros_like(tissue)
    rects: list[tuple[int, int, int, int]] = []
    n_tissue = int(tissue.sum())
    if ratio <= 0 or n_tissue == 0:
        return (mask, rects) if return_rects else mask
    lo, hi = ratio * (1 - variance), ratio * (1 + variance)
    frac = float(np.clip(rng.uniform(lo, hi) if hi > lo else ratio, 1e-9, 1 - 1e-9))
    target = int(round(frac * n_tissue))
    log_aspect = (math.log(aspect), math.log(1 / aspect))
    count = 0
    while count < target:
        remaining = target - count
        added = 0
        for _ in range(10):
            area = rng.uniform(min(min_block, remaining), remaining)
            ar = math.exp(rng.uniform(*log_aspect))
            h = max(1, int(round(math.sqrt(area * ar))))
            w = max(1, int(round(math.sqrt(area / ar))))
            if h > H or w > W:
                continue
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            new = tissue[top:top + h, left:left + w] & ~mask[top:top + h, left:left + w]
            n_new = int(new.sum())
            if 0 < n_new <= remaining:
                mask[top:top + h, left:left + w] |= new
                rects.append((top, left, h, w))
                added = n_new
                break
        if added == 0:
            free = np.argwhere(tissue & ~mask)
            pick = rng.choice(len(free), size=remaining, replace=False)
            for r, c in free[pick]:
                mask[r, c] = True
                rects.append((int(r), int(c), 1, 1))
            added = remaining
        count += added
    return (mask, rects) if return_rects else mask


# -- head ---------------------------------------------------------------------

def init_head(embed_dim: int, cfg: IbotConfig, rng: np.random.Generator, prefix: str = "head") -> nn.Params:
    p: nn.Params = {}
    nn.add_linear(p, f"{prefix}.fc1", embed_dim, cfg.head_hidden, rng)
    nn.add_linear(p, f"{prefix}.fc2", cfg.head_hidden, cfg.head_hidden, rng)
    nn.add_linear(p, f"{prefix}.fc3", cfg.head_hidden, cfg.head_bottleneck, rng)
    p[f"{prefix}.last.v"] = Tensor(nn.trunc_normal(rng, (cfg.head_bottleneck, cfg.prototype_dim)), requires_grad=True)
    p[f"{prefix}.last.g"] = Tensor(np.ones(cfg.prototype_dim), requires_grad=True)
    return p


def head_bottleneck(params: nn.Params, x, prefix: str = "head"):
    x = as_tensor(x)
    if x.ndim == 1:
        return head_bottleneck(params, x.reshape(1, -1), prefix).reshape(-1)
    h = gelu(nn.apply_linear(params, f"{prefix}.fc1", x))
    h = gelu(nn.apply_linear(params, f"{prefix}.fc2", h))
    return l2_normalize(nn.apply_linear(params, f"{prefix}.fc3", h), axis=-1)


def dino_head(params: nn.Params, x, prefix: str = "head"):
    """3-layer MLP -> L2-normalized bottleneck -> weight-normalized prototypes."""
    z = head_bottleneck(params, x, prefix)
    v = params[f"{prefix}.last.v"]
    w = v / (v * v).sum(axis=0, keepdims=True) ** 0.5 * params[f"{prefix}.last.g"]
    return matmul(z, w) if z.ndim >= 2 else matmul(z.reshape(1, -1), w).reshape(-1)


# -- loss ---------------------------------------------------------------------

def _teacher_probs(logits: np.ndarray, center: np.ndarray, temp: float) -> np.ndarray:
    z = (logits - center) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ibot_loss(student_cls, teacher_cls: np.ndarray, center: np.ndarray, t_s: float, t_t: float,
              student_patch=None, teacher_patch: np.ndarray | None = None, patch_weights: np.ndarray | None = None,
              patch_center: np.ndarray | None = None):
    """Self-distillation loss.

    student_cls: Tensor (V, B, P) with the first G views being the globals.
    teacher_cls: (G, B, P) logits from the unmasked globals (no gradient).
    student_patch / teacher_patch: (G, M, P) logits for M gathered token
    slots per global view; ``patch_weights`` (G, M) holds
    1/(#masked tokens of the owning sample) at real slots and 0 at padding, so
    summing per sample gives the mean over that sample's masked tokens.
    Returns (total, cls_term, mim_term) Tensors.
    """
    if t_s <= 0 or t_t <= 0:
        raise ConfigError("temperatures must be > 0")
    teacher_cls = np.asarray(teacher_cls)
    G, B, _ = teacher_cls.shape
    V = student_cls.shape[0]
    q = _teacher_probs(teacher_cls, center, t_t)
    logp = log_softmax(student_cls * (1.0 / t_s), axis=-1)
    # CE summed over all (v, g) with v != g, then averaged over pairs and batch
    weights = np.zeros((V, G, 1, 1))
    for v in range(V):
        for g in range(G):
            if v != g:
                weights[v, g] = 1.0
    n_pairs = weights.sum()
    target = (weights * q[None]).sum(axis=1)  # (V, B, P)
    cls_term = -(logp * target).sum() * (1.0 / (n_pairs * B))
    if student_patch is None:
        mim_term = Tensor(np.array(0.0))
        return cls_term, cls_term, mim_term
    pc = patch_center if patch_center is not None else center
    qp = _teacher_probs(np.asarray(teacher_patch), pc, t_t)
    logpp = log_softmax(student_patch * (1.0 / t_s), axis=-1)
    ce = -(logpp * qp).sum(axis=-1)  # (G, M)
    mim_term = (ce * patch_weights).sum() * (1.0 / (G * B))
    return cls_term + mim_term, cls_term, mim_term


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float = 0.9) -> np.ndarray:
    batch = np.asarray(teacher_logits).reshape(-1, center.shape[-1])
    if batch.shape[0] == 0:
        raise DataError("empty teacher batch")
    return momentum * center + (1.0 - momentum) * batch.mean(axis=0)


# -- training -----------------------------------------------------------------

@dataclass
class DistillState:
    student: nn.Params
    teacher: nn.Params
    center: np.ndarray
    patch_center: np.ndarray
    opt: OptimizerState
    epoch: int = 0
    step: int = 0


@dataclass
class PretrainResult:
    state: DistillState
    trace: list[dict] = field(default_factory=list)
    schedules: dict[str, Schedule] = field(default_factory=dict)


def init_state(enc_cfg: EncoderConfig, cfg: IbotConfig, seed: int) -> DistillState:
    rng = stream(seed, "init")
    student = init_encoder(enc_cfg, rng)
    student.update(init_head(enc_cfg.embed_dim, cfg, rng))
    student = {k: Tensor(v.data.astype(cfg.dtype), requires_grad=True) for k, v in student.items()}
    teacher = nn.clone(student, requires_grad=False)
    return DistillState(student, teacher, np.zeros(cfg.prototype_dim), np.zeros(cfg.prototype_dim),
                        OptimizerState.init(student, cfg.betas))


def build_schedules(cfg: IbotConfig, steps_per_epoch: int) -> dict[str, Schedule]:
    total = cfg.epochs * steps_per_epoch
    return {
        "lr": Schedule.warmup_cosine(cfg.lr_start, cfg.lr_peak, cfg.lr_final, cfg.warmup_epochs * steps_per_epoch, total),
        "wd": Schedule.cosine(cfg.wd_start, cfg.wd_final, total),
        "momentum": Schedule.cosine(cfg.momentum_start, cfg.momentum_final, total),
        "teacher_temp": Schedule.warmup_cosine(cfg.teacher_temp_start, cfg.teacher_temp_final, cfg.teacher_temp_final,
                                               min(cfg.warmup_teacher_temp_epochs * steps_per_epoch, total), total),
    }


def _stack_views(views: Sequence[CropView]):
    feats = np.stack([v.features.reshape(-1, v.features.shape[-1]) for v in views])
    coords = np.stack([v.coords.reshape(-1, 2) for v in views])
    mask = np.stack([v.mask.reshape(-1) for v in views])
    return feats, coords, mask


def _gather_masked(token_masks: np.ndarray, n_global: int, batch: int):
    """Index arrays selecting masked tokens, padded to a common count per view.

    token_masks: (G*B, N). Returns (rows, cols, weights) each (G, M).
    """
    counts = token_masks.sum(axis=1)
    M = max(int(counts.max()), 1)
    GB, N = token_masks.shape
    rows = np.repeat(np.arange(GB)[:, None], M, axis=1)
    cols = np.zeros((GB, M), dtype=np.int64)
    weights = np.zeros((GB, M))
    for i in range(GB):
        idx = np.flatnonzero(token_masks[i])
        cols[i, : idx.size] = idx
        if idx.size:
            weights[i, : idx.size] = 1.0 / idx.size
    return rows, cols, weights


def training_step(state: DistillState, enc_cfg: EncoderConfig, cfg: IbotConfig, viewsets, rng: np.random.Generator,
                  values: dict[str, float], freeze_last: bool) -> dict[str, float]:
    """One optimizer step on a batch of view sets; mutates ``state``."""
    B = len(viewsets)
    G = cfg.n_global
    globals_ = [vs.globals[g] for g in range(G) for vs in viewsets]  # view-major
    locals_ = [vs.locals[l] for l in range(cfg.n_local) for vs in viewsets]
    gf, gc, gm = _stack_views(globals_)
    token_masks = np.stack([
        mask_blocks(v.mask, cfg.mask_ratio, cfg.mask_ratio_var, rng).reshape(-1) for v in globals_
    ])
    rows, cols, pw = _gather_masked(token_masks, G, B)
    t_t = values["teacher_temp"]

    with no_grad():
        t_out = forward(state.teacher, enc_cfg, gf, gc, gm)
        t_cls = dino_head(state.teacher, t_out[:, 0]).data.reshape(G, B, -1)
        t_patch = dino_head(state.teacher, t_out.data[:, 1:][rows, cols]).data.reshape(G, B * rows.shape[1], -1)

    s_glob = forward(state.student, enc_cfg, gf, gc, gm, token_mask=token_masks, train=True, rng=rng)
    cls_parts = [s_glob[:, 0]]
    if cfg.n_local:
        lf, lc, lm = _stack_views(locals_)
        s_loc = forward(state.student, enc_cfg, lf, lc, lm, train=True, rng=rng)
        cls_parts.append(s_loc[:, 0])
    s_cls = dino_head(state.student, concat(cls_parts, axis=0)).reshape(G + cfg.n_local, B, -1)
    s_tokens = s_glob[:, 1:][rows, cols]  # (G*B, M, E)
    s_patch = dino_head(state.student, s_tokens).reshape(G, B * rows.shape[1], -1)
    total, cls_term, mim_term = ibot_loss(
        s_cls, t_cls, state.center, cfg.student_temp, t_t,
        s_patch, t_patch, pw.reshape(G, -1), state.patch_center,
    )
    loss_val = float(total.data)
    if not math.isfinite(loss_val):
        raise NumericalError(f"non-finite loss at step {state.step} (cls={float(cls_term.data)}, mim={float(mim_term.data)})")
    for p in state.student.values():
        p.grad = None
    backward(total)
    grad_norm = clip_grad_norm(state.student, cfg.clip_grad)
    if freeze_last:
        for k in ("head.last.v", "head.last.g"):
            state.student[k].grad = None
    grads = {k: p.grad for k, p in state.student.items()}
    adamw_step(state.student, grads, state.opt, values["lr"], nn.weight_decay_map(state.student, values["wd"]))
    ema_update(state.teacher, state.student, values["momentum"])
    state.center = update_center(state.center, t_cls, cfg.center_momentum)
    real = pw.reshape(-1) > 0
    if real.any():
        state.patch_center = update_center(state.patch_center, t_patch.reshape(-1, t_patch.shape[-1])[real],
                                           cfg.center_momentum)
    mass = _teacher_probs(t_cls, state.center, t_t).reshape(-1, t_cls.shape[-1]).mean(axis=0)
    state.step += 1
    return {
        "loss": loss_val,
        "cls_loss": float(cls_term.data),
        "mim_loss": float(mim_term.data),
        "grad_norm": grad_norm,
        "teacher_proto_std": float(mass.std()),
    }


def make_viewset(grid: FeatureGrid, groups, cfg: IbotConfig, rng: np.random.Generator):
    group = groups[int(rng.integers(len(groups)))] if groups else None
    region = sample_region_crop(grid, cfg.region_size, rng, group)
    vs = sample_views(region, rng, cfg.n_global, cfg.global_size, cfg.n_local, cfg.local_size, cfg.region_size)
    aug = lambda v: random_augment(v, rng, cfg.p_flip, cfg.posterize_bits, cfg.p_posterize)  # noqa: E731
    vs.globals = [aug(v) for v in vs.globals]
    vs.locals = [aug(v) for v in vs.locals]
    return vs


def pretrain(grids: Sequence[FeatureGrid], enc_cfg: EncoderConfig, cfg: IbotConfig, seed: int = 0,
             on_epoch_end: Callable[[int, DistillState], None] | None = None,
             state: DistillState | None = None) -> PretrainResult:
    """Run Stage-1 training; deterministic for a given seed.

    ``on_epoch_end(epoch, state)`` is also called once with epoch -1 before
    any update, which is where random-init baselines are measured.
    """
    if len(grids) < 2:
        raise DataError("pretraining needs at least two slides")
    for g in grids:
        if g.dim != enc_cfg.input_dim:
            raise DataError(f"grid feature dim {g.dim} != encoder input_dim {enc_cfg.input_dim}")
    state = state or init_state(enc_cfg, cfg, seed)
    groups = [group_tissue(g, cfg.min_group_patches) for g in grids]
    steps_per_epoch = math.ceil(len(grids) / cfg.batch_size)
    scheds = build_schedules(cfg, steps_per_epoch)
    result = PretrainResult(state, [], scheds)
    if on_epoch_end is not None:
        on_epoch_end(-1, state)
    for epoch in range(state.epoch, cfg.epochs):
        order = stream(seed, "shuffle", epoch).permutation(len(grids))
        crop_rng = stream(seed, "crop", epoch)
        step_rng = stream(seed, "step", epoch)
        for start in range(0, len(grids), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            viewsets = [make_viewset(grids[i], groups[i], cfg, crop_rng) for i in idx]
            values = {k: s(state.step) for k, s in scheds.items()}
            row = training_step(state, enc_cfg, cfg, viewsets, step_rng, values,
                                freeze_last=epoch < cfg.freeze_last_layer_epochs)
            row.update(step=state.step - 1, epoch=epoch, **values)
            result.trace.append(row)
        state.epoch = epoch + 1
        log.info("epoch %d loss %.4f", epoch, result.trace[-1]["loss"])
        if on_epoch_end is not None:
            on_epoch_end(epoch, state)
    return result


TRACE_COLUMNS = ("step", "cls_loss", "mim_loss", "lr", "wd", "momentum", "teacher_temp")


def trace_csv(trace: list[dict]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        lines.append(",".join(repr(row[c]) if c != "step" else str(row[c]) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"
