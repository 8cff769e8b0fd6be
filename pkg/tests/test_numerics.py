import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridslide.errors import ConfigError, ShapeError
from gridslide.numerics import (
    OptimizerState,
    Schedule,
    Tensor,
    adamw_step,
    backward,
    clip_grad_norm,
    ema_update,
    gelu,
    layer_norm,
    load_checkpoint,
    matmul,
    save_checkpoint,
    schedule_value,
    softmax_rows,
)
from gridslide.numerics import tensor as T
from gridslide.numerics.gradcheck import check_gradients, numeric_grad


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[3.0, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_dot(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_random_vs_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grads_flow_to_both(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.full((3, 4), 2.0), requires_grad=True)
        backward(matmul(a, b).sum())
        np.testing.assert_allclose(a.grad, np.full((2, 3), 8.0))
        np.testing.assert_allclose(b.grad, np.full((3, 4), 2.0))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0, 0]])).data, [[1 / 3] * 3])

    def test_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_ln3(self):
        # exp(ln 3) / (1 + 3) = 0.75
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        a = softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax_rows(Tensor(x + c)).data, a, atol=1e-9)


class TestLayerNormGelu:
    def test_constant_row(self):
        np.testing.assert_allclose(layer_norm(Tensor([[2.0, 2.0, 2.0]]), np.ones(3), np.zeros(3), 1e-6).data, 0.0)

    def test_standardized(self):
        x = np.random.default_rng(1).normal(3, 5, size=(4, 16))
        y = layer_norm(Tensor(x), eps=1e-12).data
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-5)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            layer_norm(Tensor([[1.0, 2.0]]), eps=0.0)

    def test_gelu_values(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0
        x = 3.0
        expected = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        assert gelu(Tensor([x])).data[0] == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(2.9964, abs=1e-4)


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2)

    def test_graph_freed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * x).sum()
        backward(y)
        first = x.grad.copy()
        backward(y)  # graph gone: y now acts as a leaf
        np.testing.assert_array_equal(x.grad, first)

    def test_mlp_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        params = {
            "w1": Tensor(rng.normal(size=(4, 6)), requires_grad=True),
            "b1": Tensor(rng.normal(size=6), requires_grad=True),
            "g": Tensor(rng.normal(size=6) + 1, requires_grad=True),
            "w2": Tensor(rng.normal(size=(6, 3)), requires_grad=True),
        }
        x = Tensor(rng.normal(size=(5, 4)))
        y = np.array([0, 2, 1, 1, 0])

        def loss():
            h = gelu(layer_norm(matmul(x, params["w1"]) + params["b1"], params["g"], None, 1e-5))
            logp = T.log_softmax(matmul(h, params["w2"]), axis=-1)
            return -logp[np.arange(5), y].mean()

        assert check_gradients(loss, params) < 1e-5

    def test_fused_ops_vs_finite_differences(self):
        rng = np.random.default_rng(4)
        params = {"a": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
                  "b": Tensor(rng.uniform(0.5, 2, size=(1, 4)), requires_grad=True)}

        def loss():
            a, b = params["a"], params["b"]
            z = T.l2_normalize(a / b, axis=-1) * T.softmax(a, axis=0)
            z = T.concat([z, T.tanh(a) ** 2.0, T.sqrt(b * b + 1.0) + T.exp(-a)], axis=0)
            z = T.transpose(z.reshape(4, 3, 3), (1, 0, 2))[1:, ::2]
            return T.log(T.clip(z, -5, 5) + 10.0).sum()

        assert check_gradients(loss, params) < 1e-5

    def test_fused_attention_matches_composed(self):
        rng = np.random.default_rng(5)
        params = {n: Tensor(rng.normal(size=(2, 3, 5, 4)), requires_grad=True) for n in "qkv"}
        bias = rng.normal(size=(1, 3, 5, 5))
        bias[..., 4] = -np.inf  # a masked key
        w = rng.normal(size=(2, 3, 5, 4))

        def fused():
            return (T.fused_attention(params["q"], params["k"], params["v"], bias, 0.5) * w).sum()

        def composed():
            s = matmul(params["q"], T.transpose(params["k"], (0, 1, 3, 2))) * 0.5 + bias
            return (matmul(T.softmax(s, axis=-1), params["v"]) * w).sum()

        assert float(fused().data) == pytest.approx(float(composed().data), abs=1e-12)
        assert check_gradients(fused, params) < 1e-6
        out = T.fused_attention(params["q"], params["k"], params["v"], bias, 0.5).data
        probs = np.exp(np.einsum("bhqd,bhkd->bhqk", params["q"].data, params["k"].data) * 0.5 + bias)
        probs /= probs.sum(-1, keepdims=True)
        assert np.allclose(out, probs @ params["v"].data, atol=1e-12)


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = {"w": Tensor(np.array([1.5, -2.0]), requires_grad=True)}
        st_ = OptimizerState.init(p)
        adamw_step(p, {"w": np.zeros(2)}, st_, lr=0.1, wd=0.0)
        np.testing.assert_array_equal(p["w"].data, [1.5, -2.0])

    def test_decoupled_decay(self):
        p = {"w": Tensor(np.array([1.0, -3.0]), requires_grad=True)}
        st_ = OptimizerState.init(p)
        adamw_step(p, {"w": np.zeros(2)}, st_, lr=1.0, wd=0.1)
        np.testing.assert_allclose(p["w"].data, [0.9, -2.7])

    def test_first_step_magnitude(self):
        # m_hat = g = 1, v_hat = 1 -> delta = -lr * 1 / (1 + eps)
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        st_ = OptimizerState.init(p, betas=(0.9, 0.999), eps=1e-8)
        adamw_step(p, {"w": np.array([1.0])}, st_, lr=0.001)
        assert p["w"].data[0] == pytest.approx(-0.001, rel=1e-6)
        assert st_.step == 1

    def test_bad_lr(self):
        p = {"w": Tensor(np.zeros(1), requires_grad=True)}
        with pytest.raises(ConfigError):
            adamw_step(p, {"w": np.zeros(1)}, OptimizerState.init(p), lr=-1e-3)

    def test_clip(self):
        p = {"a": Tensor(np.zeros(2), requires_grad=True)}
        p["a"].grad = np.array([3.0, 4.0])
        assert clip_grad_norm(p, 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p["a"].grad) == pytest.approx(1.0, abs=1e-6)


class TestEMA:
    def _pair(self, t, s):
        return {"x": Tensor(np.array(t, dtype=float))}, {"x": Tensor(np.array(s, dtype=float))}

    def test_m1_identity(self):
        t, s = self._pair([0.3], [5.0])
        ema_update(t, s, 1.0)
        assert t["x"].data[0] == 0.3

    def test_m0_copies(self):
        t, s = self._pair([0.3], [5.0])
        ema_update(t, s, 0.0)
        assert t["x"].data[0] == 5.0

    def test_convex(self):
        t, s = self._pair([0.0], [1.0])
        ema_update(t, s, 0.996)
        assert t["x"].data[0] == pytest.approx(0.004)

    def test_geometric_convergence(self):
        t, s = self._pair([0.0], [1.0])
        for k in range(1, 50):
            ema_update(t, s, 0.8)
            assert 1 - t["x"].data[0] == pytest.approx(0.8 ** k)

    def test_shape_mismatch(self):
        t, s = self._pair([0.0], [1.0, 2.0])
        with pytest.raises(ShapeError):
            ema_update(t, s, 0.5)


class TestSchedule:
    def test_endpoints(self):
        s = Schedule.cosine(0.04, 0.07, total=100)
        assert schedule_value(s, 0) == pytest.approx(0.04)
        assert schedule_value(s, 100) == pytest.approx(0.07)
        assert schedule_value(s, 50) == pytest.approx(0.055)

    def test_warmup_linear_then_cosine(self):
        s = Schedule.warmup_cosine(0.0, 5e-4, 1e-6, warmup=10, total=110)
        assert s(0) == 0.0
        assert s(5) == pytest.approx(2.5e-4)
        assert s(10) == pytest.approx(5e-4)
        assert s(60) == pytest.approx(1e-6 + 0.5 * (5e-4 - 1e-6))
        assert s(110) == pytest.approx(1e-6)

    def test_clamp_past_total(self):
        assert Schedule.cosine(1.0, 0.0, 10)(25) == pytest.approx(0.0)

    def test_bad_warmup(self):
        with pytest.raises(ConfigError):
            Schedule.warmup_cosine(0, 1, 0, warmup=20, total=10)

    @given(st.integers(0, 200))
    def test_within_bounds(self, t):
        s = Schedule.warmup_cosine(0.0, 5e-4, 1e-6, warmup=30, total=200)
        lo, hi = s.bounds()
        assert lo - 1e-15 <= s(t) <= hi + 1e-15


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"enc.w": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "b": rng.normal(size=7)}
        path = tmp_path / "m.gsld"
        save_checkpoint(path, tensors)
        raw = path.read_bytes()
        assert raw[:4] == b"GSLD"
        back = load_checkpoint(path)
        assert set(back) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k].astype(np.float32).astype(np.float64))
        save_checkpoint(tmp_path / "again.gsld", back)
        assert (tmp_path / "again.gsld").read_bytes() == raw


class TestFiniteDifferences:
    @staticmethod
    def loss_of(x, fn):
        return lambda: T.Tensor(np.array(fn(x.data[0])))

    def test_five_point_exact_on_quartic(self):
        x = T.Tensor(np.array([0.7]), requires_grad=True)
        g = numeric_grad(self.loss_of(x, lambda v: v ** 4 - 3 * v ** 3), x, h=1e-2, stencil=5)
        assert g[0] == pytest.approx(4 * 0.7 ** 3 - 9 * 0.7 ** 2, abs=1e-10)

    def test_ridders_on_sharp_function(self):
        # tanh(x / 1e-3): a fixed 3-point step of 1e-5 is off by ~1e-5 relative
        x = T.Tensor(np.array([4e-4]), requires_grad=True)
        exact = (1 - math.tanh(0.4) ** 2) / 1e-3
        fn = self.loss_of(x, lambda v: math.tanh(v / 1e-3))
        three = numeric_grad(fn, x, h=1e-5)[0]
        ridders = numeric_grad(fn, x, h=3e-4, stencil="ridders")[0]
        assert abs(ridders - exact) / exact < 1e-9 < abs(three - exact) / exact

    def test_parameter_restored_and_bad_stencil(self):
        x = T.Tensor(np.array([0.25]), requires_grad=True)
        numeric_grad(self.loss_of(x, math.sin), x, stencil="ridders")
        assert x.data[0] == 0.25
        with pytest.raises(ValueError):
            numeric_grad(self.loss_of(x, math.sin), x, stencil=7)
        assert x.data[0] == 0.25
