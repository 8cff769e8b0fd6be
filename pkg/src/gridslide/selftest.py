"""Fast built-in oracle and invariant checks used by ``gridslide selftest``.

Each check returns a short detail string and raises AssertionError on
failure; the whole set runs in a few seconds so it can guard a fresh install.
"""
from __future__ import annotations

import itertools
import time
from typing import Callable

import numpy as np

from gridslide import nn
from gridslide.align import beam_search, caption_loss, contrastive_loss, greedy_decode
from gridslide.align.model import TextConfig, attentional_pool, decoder_logits, init_align, init_pooler, text_forward
from gridslide.encoder import EncoderConfig, encode, forward, init_encoder
from gridslide.evaluation import auroc, balanced_accuracy, c_index, kappa_quadratic
from gridslide.evaluation.survival import cox_objective
from gridslide.feature_grid import CropView, augment
from gridslide.ibot import IbotConfig, dino_head, init_head
from gridslide.numerics import Tensor, check_gradients
from gridslide.numerics.checkpoint import decode_checkpoint, encode_checkpoint
from gridslide.retrieval import acc_at_k, build_index, mv_acc_at_5, query_all

GRAD_TOL = 1e-5


def _random_view(rng, side=5, dim=4):
    mask = rng.random((side, side)) < 0.8
    mask[0, 0] = True
    feats = rng.normal(size=(side, side, dim)) * mask[..., None]
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return CropView(feats, mask, np.stack([rows, cols], -1))


def _o1(params, rng, scale=0.5):
    """Replace parameters by O(1) draws so finite differences stay accurate."""
    return {k: Tensor(rng.normal(size=v.shape) * scale + (1.0 if k.endswith((".g", ".last.g")) else 0.0),
                      requires_grad=True) for k, v in params.items()}


def check_gradients_encoder() -> str:
    rng = np.random.default_rng(0)
    cfg = EncoderConfig(layers=1, heads=2, head_dim=3, mlp_hidden=8, input_dim=4, drop_path_rate=0.0)
    params = _o1(init_encoder(cfg, rng), rng, 0.3)
    feats, coords, mask = _random_view(rng).tokens()
    w = rng.normal(size=(1, int(mask.size) + 1, cfg.embed_dim))
    loss = lambda: (forward(params, cfg, feats[None], coords[None], mask[None]) * w).sum()
    err = check_gradients(loss, params, max_entries=4)
    assert err < GRAD_TOL, f"encoder gradient error {err:.2e}"
    return f"max rel err {err:.1e}"


def check_gradients_head_and_pooler() -> str:
    rng = np.random.default_rng(1)
    head = _o1(init_head(6, IbotConfig(prototype_dim=5, head_hidden=7, head_bottleneck=4), rng), rng)
    x, w = rng.normal(size=(3, 6)), rng.normal(size=(3, 5))
    e1 = check_gradients(lambda: (dino_head(head, x) * w).sum(), head, max_entries=4)
    pool: nn.Params = {}
    init_pooler(pool, "p", 2, 6, rng)
    pool = _o1(pool, rng)
    toks, w2 = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 2, 6))
    e2 = check_gradients(lambda: (attentional_pool(pool, "p", toks, None, 2) * w2).sum(), pool, max_entries=4)
    assert max(e1, e2) < GRAD_TOL, f"head {e1:.2e} pooler {e2:.2e}"
    return f"max rel err {max(e1, e2):.1e}"


def check_gradients_decoder_and_losses() -> str:
    rng = np.random.default_rng(2)
    cfg = TextConfig(7, width=6, heads=2, text_layers=1, decoder_layers=1, mlp_hidden=8, max_len=8, n_recon=3)
    params = _o1(init_align(cfg, rng, 6), rng, 0.3)
    keep = {k: v for k, v in params.items() if k.startswith(("text.", "dec."))}
    ids = np.array([[1, 4, 5, 2], [1, 6, 2, 0]])
    mask = ids > 0
    mask[:, 0] = True
    recon = rng.normal(size=(2, 3, 6))

    def loss():
        return caption_loss(decoder_logits(keep, cfg, text_forward(keep, cfg, ids, mask), recon, mask), ids, mask)

    e1 = check_gradients(loss, keep, max_entries=3)
    img = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    txt = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    e2 = check_gradients(lambda: contrastive_loss(img, txt, 0.5), {"img": img, "txt": txt})
    assert max(e1, e2) < GRAD_TOL, f"decoder {e1:.2e} contrastive {e2:.2e}"
    return f"max rel err {max(e1, e2):.1e}"


def check_cox_gradient() -> str:
    rng = np.random.default_rng(3)
    X, t = rng.normal(size=(12, 3)), rng.integers(1, 6, 12).astype(float)
    e = rng.random(12) < 0.6
    e[:2] = True
    beta = rng.normal(size=3)
    _, g = cox_objective(beta, X, t, e, 0.3)
    h = 1e-6
    num = np.array([(cox_objective(beta + h * d, X, t, e, 0.3)[0] - cox_objective(beta - h * d, X, t, e, 0.3)[0]) / (2 * h)
                    for d in np.eye(3)])
    err = float(np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-4)))
    assert err < GRAD_TOL, f"Cox gradient error {err:.2e}"
    return f"max rel err {err:.1e}"


def check_alibi_flips() -> str:
    rng = np.random.default_rng(4)
    cfg = EncoderConfig(layers=2, heads=2, head_dim=4, mlp_hidden=8, input_dim=4)
    params = init_encoder(cfg, rng)
    view = _random_view(rng, side=6)
    ref = encode(view, params, cfg)[0]
    worst = max(float(np.abs(encode(augment(view, h, v), params, cfg)[0] - ref).max())
                for h, v in ((True, False), (False, True), (True, True)))
    assert worst < 1e-9, f"flip changed the cls output by {worst:.2e}"
    return f"max diff {worst:.1e}"


def _brute_balanced_accuracy(p, y):
    recalls = []
    for c in sorted(set(y.tolist())):
        idx = [i for i in range(len(y)) if y[i] == c]
        recalls.append(sum(p[i] == c for i in idx) / len(idx))
    return sum(recalls) / len(recalls)


def _brute_auroc(s, y):
    pos = [s[i] for i in range(len(y)) if y[i] == 1]
    neg = [s[i] for i in range(len(y)) if y[i] == 0]
    return sum((a > b) + 0.5 * (a == b) for a in pos for b in neg) / (len(pos) * len(neg))


def _brute_cindex(r, t, e):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(t)), 2):
        if e[i] and t[i] < t[j]:
            den += 1
            num += 1.0 if r[i] > r[j] else 0.5 if r[i] == r[j] else 0.0
    return num / den


def check_metric_oracles() -> str:
    rng = np.random.default_rng(5)
    n = 0
    for _ in range(100):
        N, C = int(rng.integers(4, 30)), int(rng.integers(2, 5))
        y, p = rng.integers(0, C, N), rng.integers(0, C, N)
        if len(set(y.tolist())) < 2:
            continue
        assert abs(balanced_accuracy(p, y) - _brute_balanced_accuracy(p, y)) < 1e-12
        yb = (y == y[0]).astype(int)
        if 0 < yb.sum() < N:
            s = rng.integers(0, 5, N).astype(float)
            assert abs(auroc(s, yb) - _brute_auroc(s, yb)) < 1e-12
        t, e = rng.integers(1, 8, N).astype(float), rng.random(N) < 0.7
        r = rng.normal(size=N)
        if any(e[i] and t[i] < t[j] for i in range(N) for j in range(N)):
            assert abs(c_index(r, t, e) - _brute_cindex(r, t, e)) < 1e-12
        k = kappa_quadratic(p, y, C)
        assert -1 - 1e-12 <= k <= 1 + 1e-12
        n += 1
    return f"{n} random instances"


def check_retrieval_invariants() -> str:
    rng = np.random.default_rng(6)
    for _ in range(50):
        keys, labels = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
        idx = build_index(keys, labels)
        q, ql = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
        res = query_all(idx, q, ql, k=len(idx))
        assert mv_acc_at_5(res) <= acc_at_k(res, 5)
        for r, qv in zip(res, q):
            cos = idx.keys @ idx.transform(qv)[0]
            assert r.ranked_ids == [idx.ids[i] for i in np.lexsort((np.asarray(idx.ids), -cos))]
    return "50 random indexes"


def check_beam_search() -> str:
    def model(seed):
        def step(prefixes):
            out = []
            for p in prefixes:
                z = np.random.default_rng([seed, len(p)] + list(p)).normal(size=6) * 2
                out.append(z - np.log(np.exp(z).sum()))
            return np.stack(out)
        return step

    for seed in range(20):
        step = model(seed)
        g = greedy_decode(step, 6, 0, 6)
        assert beam_search(step, 6, 0, beams=1, max_len=6).tokens == g.tokens
        assert beam_search(step, 6, 0, beams=5, max_len=6).score >= g.score - 1e-12
    return "20 random decoders"


def check_checkpoint_roundtrip() -> str:
    rng = np.random.default_rng(7)
    t = {"a.w": rng.normal(size=(3, 2)).astype(np.float32), "b": np.float32(rng.normal(size=()))}
    back = decode_checkpoint(encode_checkpoint(t), dtype=np.float32)
    assert all(np.array_equal(back[k], t[k]) for k in t)
    return "bit-exact"


CHECKS: dict[str, Callable[[], str]] = {
    "encoder gradients": check_gradients_encoder,
    "head and pooler gradients": check_gradients_head_and_pooler,
    "decoder and loss gradients": check_gradients_decoder_and_losses,
    "Cox gradient": check_cox_gradient,
    "ALiBi flip invariance": check_alibi_flips,
    "metric oracles": check_metric_oracles,
    "retrieval invariants": check_retrieval_invariants,
    "beam search": check_beam_search,
    "checkpoint round-trip": check_checkpoint_roundtrip,
}


def run_checks(log: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = fn()
            log(f"PASS  {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
        except Exception as exc:  # every failure is reported, the run continues
            ok = False
            log(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    return ok
