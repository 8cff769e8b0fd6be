import math

import numpy as np
import pytest

from gridslide.encoder import (
    EncoderConfig,
    alibi_bias,
    attention,
    encode,
    encode_tokens,
    forward,
    head_slopes,
    init_encoder,
    mean_pool_baseline,
    rotary_tables,
)
from gridslide.errors import DataError
from gridslide.feature_grid import CropView, FeatureGrid, augment
from gridslide.numerics.gradcheck import check_gradients


def tiny_cfg(**kw):
    base = dict(layers=2, heads=2, head_dim=4, mlp_hidden=16, input_dim=5, drop_path_rate=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def random_view(h, w, d, seed=0, p_background=0.0):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) >= p_background
    mask.flat[0] = True
    feats = rng.normal(size=(h, w, d)) * mask[..., None]
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return CropView(feats, mask, np.stack([rows, cols], -1))


# -- numpy reference without positional information ---------------------------

def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def np_ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def plain_transformer(params, cfg, feats, mask):
    P = {k: v.data for k, v in params.items()}
    x = np_gelu(feats @ P["enc.patch_embed.fc1.w"] + P["enc.patch_embed.fc1.b"])
    x = x @ P["enc.patch_embed.fc2.w"] + P["enc.patch_embed.fc2.b"]
    x = np.concatenate([P["enc.cls_token"][None], x], 0)
    allowed = np.concatenate([[True], mask])
    H, hd = cfg.heads, cfg.head_dim
    for i in range(cfg.layers):
        b = f"enc.blocks.{i}"
        h = np_ln(x, P[f"{b}.norm1.g"], P[f"{b}.norm1.b"], cfg.ln_eps)
        qkv = h @ P[f"{b}.attn.qkv.w"] + P[f"{b}.attn.qkv.b"]
        heads = []
        for j in range(H):
            q = qkv[:, j * hd:(j + 1) * hd]
            k = qkv[:, cfg.embed_dim + j * hd: cfg.embed_dim + (j + 1) * hd]
            v = qkv[:, 2 * cfg.embed_dim + j * hd: 2 * cfg.embed_dim + (j + 1) * hd]
            s = q @ k.T / math.sqrt(hd)
            s[:, ~allowed] = -np.inf
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            heads.append(a @ v)
        x = x + np.concatenate(heads, 1) @ P[f"{b}.attn.proj.w"] + P[f"{b}.attn.proj.b"]
        h = np_ln(x, P[f"{b}.norm2.g"], P[f"{b}.norm2.b"], cfg.ln_eps)
        x = x + np_gelu(h @ P[f"{b}.mlp.fc1.w"] + P[f"{b}.mlp.fc1.b"]) @ P[f"{b}.mlp.fc2.w"] + P[f"{b}.mlp.fc2.b"]
    return np_ln(x, P["enc.norm.g"], P["enc.norm.b"], cfg.ln_eps)


class TestSlopes:
    def test_eight_heads(self):
        np.testing.assert_allclose(head_slopes(8), [2.0 ** -k for k in range(1, 9)])

    def test_one_head(self):
        np.testing.assert_allclose(head_slopes(1), [2.0 ** -8])

    def test_twelve_heads_first(self):
        assert head_slopes(12)[0] == pytest.approx(0.6300, abs=1e-4)


class TestAlibiBias:
    def test_zero_on_diagonal(self):
        c = np.array([[2, 3], [5, 1]])
        assert np.all(np.diag(alibi_bias(c, c, 0.7)) == 0)

    def test_345(self):
        assert alibi_bias(np.array([[0, 0]]), np.array([[3, 4]]), 0.5)[0, 0] == pytest.approx(-2.5)

    def test_2x2_grid(self):
        c = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
        b = alibi_bias(c, c, 1.0)
        for i in range(4):
            off = sorted(np.delete(b[i], i))
            np.testing.assert_allclose(off, [-math.sqrt(2), -1, -1])


class TestAttention:
    def test_single_token(self):
        v = np.array([[1.0, -2.0, 3.0]])
        out = attention(np.ones((1, 3)), np.ones((1, 3)), v, np.array([[4, 4]]), 0.5)
        np.testing.assert_allclose(out.data, v)

    def test_slope_zero_is_plain_attention(self):
        rng = np.random.default_rng(0)
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        coords = rng.integers(0, 5, size=(6, 2))
        s = q @ k.T / 2.0
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        np.testing.assert_allclose(attention(q, k, v, coords, 0.0).data, a @ v, atol=1e-12)

    def test_huge_slope_attends_to_self(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        coords = np.array([[0, 0], [0, 1], [3, 2], [1, 1], [4, 4]])
        np.testing.assert_allclose(attention(q, k, v, coords, 1e4).data, v, atol=1e-6)

    def test_all_masked_rejected(self):
        with pytest.raises(DataError):
            attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)), 1.0, np.array([False, False]))

    def test_masked_key_gets_no_weight(self):
        rng = np.random.default_rng(2)
        q, k, v = (rng.normal(size=(4, 3)) for _ in range(3))
        coords = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
        mask = np.array([True, True, False, True])
        out = attention(q, k, v, coords, 0.3, mask).data
        v2 = v.copy()
        v2[2] = 1e6
        np.testing.assert_allclose(attention(q, k, v2, coords, 0.3, mask).data, out, atol=1e-9)


class TestEncode:
    def setup_method(self):
        self.cfg = tiny_cfg()
        self.params = init_encoder(self.cfg, np.random.default_rng(0))
        # larger weights so that positional effects are visible in float64
        for p in self.params.values():
            p.data += np.random.default_rng(1).normal(0, 0.3, size=p.data.shape)

    def test_shapes(self):
        for n in (1, 7, 36):
            view = random_view(1, n, 5, seed=n)
            cls, toks = encode(view, self.params, self.cfg)
            assert cls.shape == (8,) and toks.shape == (n + 1, 8)

    @pytest.mark.parametrize("fh,fv", [(True, False), (False, True), (True, True)])
    def test_flip_invariance(self, fh, fv):
        view = random_view(6, 6, 5, seed=3, p_background=0.2)
        cls, _ = encode(view, self.params, self.cfg)
        cls_f, _ = encode(augment(view, fh, fv), self.params, self.cfg)
        np.testing.assert_allclose(cls_f, cls, atol=1e-9)

    def test_permutation_invariance(self):
        view = random_view(5, 5, 5, seed=4)
        f, c, m = view.tokens()
        perm = np.random.default_rng(5).permutation(len(m))
        a, _ = encode_tokens(f, c, m, self.params, self.cfg)
        b, _ = encode_tokens(f[perm], c[perm], m[perm], self.params, self.cfg)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_positions_matter(self):
        view = random_view(5, 5, 5, seed=4)
        f, c, m = view.tokens()
        perm = np.random.default_rng(5).permutation(len(m))
        a, _ = encode_tokens(f, c, m, self.params, self.cfg)
        b, _ = encode_tokens(f, c[perm], m, self.params, self.cfg)
        assert np.abs(a - b).max() > 1e-6

    def test_slope_zero_matches_plain_transformer(self):
        view = random_view(4, 5, 5, seed=6, p_background=0.3)
        f, c, m = view.tokens()
        ours = forward(self.params, self.cfg, f[None], c[None], m[None], slopes=np.zeros(2)).data[0]
        ref = plain_transformer(self.params, self.cfg, f, m)
        np.testing.assert_allclose(ours[0], ref[0], atol=1e-10)
        np.testing.assert_allclose(ours[1:][m], ref[1:][m], atol=1e-10)

    def test_none_encoding_matches_plain_transformer(self):
        cfg = tiny_cfg(pos_encoding="none")
        view = random_view(3, 3, 5, seed=7)
        f, c, m = view.tokens()
        ours = forward(self.params, cfg, f[None], c[None], m[None]).data[0]
        np.testing.assert_allclose(ours, plain_transformer(self.params, cfg, f, m), atol=1e-10)

    def test_size_agnostic(self):
        for side in (6, 14, 16, 64):
            view = random_view(side, side, 5, seed=side, p_background=0.5)
            cls, toks = encode(view, self.params, self.cfg)
            assert np.all(np.isfinite(cls)) and toks.shape == (side * side + 1, 8)

    def test_eval_deterministic(self):
        view = random_view(6, 6, 5, seed=8)
        a = encode(view, self.params, self.cfg)[0]
        b = encode(view, self.params, self.cfg)[0]
        assert np.array_equal(a, b)

    def test_empty_tissue(self):
        view = random_view(2, 2, 5)
        view.mask[:] = False
        with pytest.raises(DataError):
            encode(view, self.params, self.cfg)

    def test_padded_batch_matches_compact(self):
        view = random_view(4, 4, 5, seed=9, p_background=0.4)
        f, c, m = view.tokens()
        cls, _ = encode_tokens(f, c, m, self.params, self.cfg)
        full = forward(self.params, self.cfg, f[None], c[None], m[None]).data[0, 0]
        np.testing.assert_allclose(full, cls, atol=1e-12)

    @pytest.mark.parametrize("pos", ["absolute", "rotary"])
    def test_other_providers_forward(self, pos):
        cfg = tiny_cfg(pos_encoding=pos)
        view = random_view(4, 4, 5, seed=10)
        f, c, m = view.tokens()
        a, _ = encode_tokens(f, c, m, self.params, cfg)
        perm = np.random.default_rng(0).permutation(len(m))
        b, _ = encode_tokens(f[perm], c[perm], m[perm], self.params, cfg)
        np.testing.assert_allclose(a, b, atol=1e-9)
        shifted, _ = encode_tokens(f, c[perm], m, self.params, cfg)
        assert np.abs(a - shifted).max() > 1e-6

    def test_rotary_scores_depend_on_offsets_only(self):
        rng = np.random.default_rng(11)
        q, k = rng.normal(size=(2, 8))
        coords = np.array([[[0, 0], [2, 5], [-1, 3]]])
        cos, sin, rot = rotary_tables(coords, 8)
        shifted = rotary_tables(coords + np.array([7, 3]), 8)

        def score(tables, i, j):
            c, s, r = tables
            qi = q * c[0, 0, i] + (q @ r) * s[0, 0, i]
            kj = k * c[0, 0, j] + (k @ r) * s[0, 0, j]
            return qi @ kj

        for i, j in [(1, 2), (2, 3), (1, 3)]:
            assert score((cos, sin, rot), i, j) == pytest.approx(score(shifted, i, j), abs=1e-12)
        # the rotation is orthogonal
        c, s = cos[0, 0, 2], sin[0, 0, 2]
        assert np.linalg.norm(q * c + (q @ rot) * s) == pytest.approx(np.linalg.norm(q))

    def test_gradients(self):
        cfg = tiny_cfg(layers=1)
        params = init_encoder(cfg, np.random.default_rng(2))
        for p in params.values():
            p.data += np.random.default_rng(3).normal(0, 0.2, size=p.data.shape)
        view = random_view(3, 3, 5, seed=12, p_background=0.3)
        f, c, m = view.tokens()
        tm = np.zeros(9, bool)
        tm[[1, 4]] = True

        def loss():
            out = forward(params, cfg, f[None], c[None], m[None], token_mask=tm[None])
            return (out * out).sum() * 0.1 + out[0, 0].sum()

        assert check_gradients(loss, params) < 1e-5


class TestMeanPool:
    def test_one_cell(self):
        feats = np.zeros((2, 2, 3))
        feats[1, 0] = [1, 2, 3]
        mask = np.zeros((2, 2), bool)
        mask[1, 0] = True
        np.testing.assert_array_equal(mean_pool_baseline(FeatureGrid(feats, mask)).vector, [1, 2, 3])

    def test_symmetric(self):
        x = np.array([0.5, -1.0, 2.0])
        g = FeatureGrid(np.stack([x, -x])[None], np.ones((1, 2), bool))
        np.testing.assert_allclose(mean_pool_baseline(g).vector, 0.0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        mask = rng.random((7, 9)) < 0.6
        mask[0, 0] = True
        feats = rng.normal(size=(7, 9, 4)) * mask[..., None]
        total, count = np.zeros(4), 0
        for r in range(7):
            for c in range(9):
                if mask[r, c]:
                    total += feats[r, c]
                    count += 1
        np.testing.assert_allclose(mean_pool_baseline(FeatureGrid(feats, mask)).vector, total / count, atol=1e-12)
