import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridslide.errors import DataError, MetricUndefined
from gridslide.evaluation import (
    ALPHA_GRID,
    L2_GRID,
    N_BOOTSTRAP,
    TEMPLATES,
    EvalReport,
    LabeledEmbeddings,
    PromptEnsemble,
    auroc,
    balanced_accuracy,
    bleu1,
    bootstrap_ci,
    c_index,
    cox_fit,
    cox_objective,
    few_shot_protocol,
    kappa_quadratic,
    knn_predict,
    linear_probe,
    logistic_fit,
    logistic_objective,
    meteor_lite,
    rouge1,
    simpleshot,
    site_preserved_folds,
    survival_eval,
    weighted_f1,
    zero_shot,
)
from gridslide.numerics import relative_error


# -- brute-force references ----------------------------------------------------

def ref_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    tot = 0.0
    for p in pos:
        for n in neg:
            tot += 1.0 if p > n else 0.5 if p == n else 0.0
    return tot / (len(pos) * len(neg))


def ref_kappa(preds, labels, C):
    N = len(preds)
    O = [[0.0] * C for _ in range(C)]
    for p, y in zip(preds, labels):
        O[y][p] += 1 / N
    rows = [sum(O[i]) for i in range(C)]
    cols = [sum(O[i][j] for i in range(C)) for j in range(C)]
    num = sum((i - j) ** 2 * O[i][j] for i in range(C) for j in range(C))
    den = sum((i - j) ** 2 * rows[i] * cols[j] for i in range(C) for j in range(C))
    return 1.0 if den == 0 else 1 - num / den


def ref_f1(preds, labels):
    out, N = 0.0, len(labels)
    for c in set(labels):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        prec_d = sum(1 for p in preds if p == c)
        rec_d = sum(1 for y in labels if y == c)
        pr = tp / prec_d if prec_d else 0.0
        rc = tp / rec_d
        f1 = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
        out += f1 * rec_d / N
    return out


def ref_cindex(risk, time, event):
    num = den = 0.0
    for i in range(len(risk)):
        for j in range(len(risk)):
            if event[i] and time[i] < time[j]:
                den += 1
                num += 1.0 if risk[i] > risk[j] else 0.5 if risk[i] == risk[j] else 0.0
    return num / den


# -- metrics -----------------------------------------------------------------

class TestMetrics:
    def test_hand_balanced_accuracy(self):
        assert balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx(5 / 6, abs=1e-15)

    def test_perfect(self):
        y = np.array([0, 1, 2, 2, 1])
        assert balanced_accuracy(y, y) == 1.0
        assert weighted_f1(y, y) == 1.0
        assert kappa_quadratic(y, y) == 1.0
        assert auroc([0.1, 0.9, 0.8], [0, 1, 1]) == 1.0

    def test_random_vs_references(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            N, C = int(rng.integers(2, 40)), int(rng.integers(2, 6))
            y = rng.integers(0, C, N)
            p = rng.integers(0, C, N)
            assert weighted_f1(p, y) == pytest.approx(ref_f1(list(p), list(y)), abs=1e-12)
            assert kappa_quadratic(p, y, C) == pytest.approx(ref_kappa(list(p), list(y), C), abs=1e-12)
            s = rng.integers(0, 5, N).astype(float)  # many ties
            yb = rng.integers(0, 2, N)
            if 0 < yb.sum() < N:
                assert auroc(s, yb) == pytest.approx(ref_auroc(s, yb), abs=1e-12)

    def test_single_class_auroc_undefined(self):
        with pytest.raises(MetricUndefined):
            auroc([0.2, 0.4], [1, 1])

    @given(st.lists(st.integers(0, 3), min_size=2, max_size=20), st.data())
    @settings(max_examples=60, deadline=None)
    def test_kappa_one_iff_equal(self, labels, data):
        preds = data.draw(st.lists(st.integers(0, 3), min_size=len(labels), max_size=len(labels)))
        k = kappa_quadratic(preds, labels, 4)
        assert (k == 1.0) == (preds == labels)

    def test_random_predictor_chance(self):
        rng = np.random.default_rng(1)
        C, N, T = 4, 40, 10_000
        vals = np.array([balanced_accuracy(rng.integers(0, C, N), rng.integers(0, C, N)) for _ in range(T)])
        assert abs(vals.mean() - 1 / C) < 3 * vals.std() / math.sqrt(T)


class TestTextMetrics:
    def test_identical(self):
        t = "the slide shows serous carcinoma with papillae"
        assert bleu1(t, t) == 1.0 and rouge1(t, t) == 1.0 and meteor_lite(t, t) == 1.0

    def test_bleu_half(self):
        assert bleu1(["a", "b"], ["a", "c"]) == 0.5

    def test_no_overlap_and_empty(self):
        assert bleu1("a b", "c d") == rouge1("a b", "c d") == meteor_lite("a b", "c d") == 0.0
        assert bleu1("", "a") == rouge1([], "a") == meteor_lite("", "a") == 0.0

    def test_meteor_fragmentation(self):
        # matches a, b, c in two chunks: frag = (2-1)/(3-1)
        score = meteor_lite(["a", "b", "x", "c"], ["a", "b", "c"])
        p, r = 3 / 4, 1.0
        fmean = 10 * p * r / (r + 9 * p)
        assert score == pytest.approx(fmean * (1 - 0.5 * 0.5 ** 3))

    def test_brevity_penalty(self):
        assert bleu1("a", "a b") == pytest.approx(math.exp(1 - 2))


# -- classifiers -------------------------------------------------------------

class TestLogistic:
    def test_gradient(self):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(12, 3)), rng.integers(0, 3, 12)
        Y = np.eye(3)[y]
        th = rng.normal(size=12)
        _, g = logistic_objective(th, X, Y, 0.7)
        num = np.zeros_like(th)
        for i in range(th.size):
            e = np.zeros_like(th)
            e[i] = 1e-6
            num[i] = (logistic_objective(th + e, X, Y, 0.7)[0] - logistic_objective(th - e, X, Y, 0.7)[0]) / 2e-6
        assert relative_error(g, num).max() < 1e-5

    def test_ridge_limit(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(30, 4)), np.r_[np.zeros(20, int), np.ones(10, int)]
        m = logistic_fit(X, y, l2=1e9)
        assert np.linalg.norm(m.W) < 1e-3
        assert np.allclose(m.predict_proba(X)[0], [2 / 3, 1 / 3], atol=1e-3)

    def test_two_points_1d(self):
        X, y = np.array([[-1.0], [1.0]]), np.array([0, 1])
        m = logistic_fit(X, y, l2=1.0)
        assert list(m.predict(X)) == [0, 1]
        # 1-D objective scan oracle for the symmetric optimum w = w1 - w0, b = 0
        ws = np.linspace(0, 5, 50001)
        obj = 2 * np.log1p(np.exp(-ws)) + 0.25 * ws ** 2  # ||W||^2 = w^2/2 at the symmetric split
        w_star = ws[np.argmin(obj)]
        assert m.W[0, 1] - m.W[0, 0] == pytest.approx(w_star, abs=1e-3)

    def test_descent(self):
        rng = np.random.default_rng(2)
        X, y = rng.normal(size=(40, 5)), rng.integers(0, 3, 40)
        m = logistic_fit(X, y, 0.1)
        Y = np.eye(3)[y]
        th = np.concatenate([m.W.ravel(), m.b])
        assert logistic_objective(th, X, Y, 0.1)[0] <= logistic_objective(np.zeros_like(th), X, Y, 0.1)[0]

    def test_single_class_warns(self):
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            m = logistic_fit(np.ones((3, 2)), np.array([1, 1, 1]), n_classes=3)
        assert w and list(m.predict(np.zeros((2, 2)))) == [1, 1]

    def test_monotone_shrinkage(self):
        rng = np.random.default_rng(3)
        X, y = rng.normal(size=(40, 4)), rng.integers(0, 3, 40)
        norms = [np.linalg.norm(logistic_fit(X, y, float(l2), 500).W) for l2 in L2_GRID]
        assert all(b <= a * (1 + 1e-6) + 1e-9 for a, b in zip(norms, norms[1:]))


class TestProbe:
    def test_grid(self):
        assert len(L2_GRID) == 45 and L2_GRID[0] == pytest.approx(1e-6) and L2_GRID[-1] == pytest.approx(1e5)
        assert np.allclose(np.diff(np.log(L2_GRID)), np.log(L2_GRID[1] / L2_GRID[0]))

    def test_separable(self):
        rng = np.random.default_rng(0)

        def split(n, tag):
            y = rng.integers(0, 3, n)
            X = rng.normal(size=(n, 6)) * 0.1
            X[np.arange(n), y] += 3.0
            return LabeledEmbeddings(X, y, tag)

        test = split(60, "test")
        res = linear_probe(split(60, "train"), test, split(30, "val"))
        assert [l2 for l2, _ in res.val_curve] == list(L2_GRID)
        assert balanced_accuracy(res.predictions, test.labels) == 1.0

    def test_no_val_fallback(self):
        rng = np.random.default_rng(1)
        tr = LabeledEmbeddings(rng.normal(size=(20, 3)), rng.integers(0, 2, 20))
        te = LabeledEmbeddings(rng.normal(size=(5, 3)), rng.integers(0, 2, 5), "test")
        res = linear_probe(tr, te)
        assert res.l2 == 1.0 and res.val_curve == []


def ref_simpleshot(Xtr, ytr, Xte):
    mu = Xtr.mean(axis=0)
    norm = lambda v: (v - mu) / np.linalg.norm(v - mu)  # noqa: E731
    C = int(ytr.max()) + 1
    protos = [np.mean([norm(x) for x, y in zip(Xtr, ytr) if y == c], axis=0) for c in range(C)]
    out = []
    for q in Xte:
        d = [float(np.sum((norm(q) - p) ** 2)) for p in protos]
        out.append(min(range(C), key=lambda c: (d[c], c)))
    return np.array(out)


def ref_knn(Xtr, ytr, Xte, k):
    mu = Xtr.mean(axis=0)
    norm = lambda v: (v - mu) / np.linalg.norm(v - mu)  # noqa: E731
    out = []
    for q in Xte:
        d = sorted(((float(np.sum((norm(q) - norm(x)) ** 2)), i) for i, x in enumerate(Xtr)))
        votes = {}
        for _, i in d[:k]:
            votes[ytr[i]] = votes.get(ytr[i], 0) + 1
        best = max(votes.values())
        out.append(min(c for c, v in votes.items() if v == best))
    return np.array(out)


class TestPrototypes:
    def test_lone_sample(self):
        tr = LabeledEmbeddings(np.array([[0.0, 1.0], [1.0, 0.0], [-1.0, -1.0]]), np.array([0, 1, 2]))
        assert simpleshot(tr, tr.embeddings[[1]])[0] == 1

    def test_midpoint_tie(self):
        tr = LabeledEmbeddings(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]))
        assert simpleshot(tr, np.array([[0.0, 1.0]]))[0] == 0
        assert knn_predict(tr, np.array([[0.0, 1.0]]), k=2)[0] == 0

    def test_random_vs_oracles(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n, C, D = int(rng.integers(6, 30)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
            y = np.r_[np.arange(C), rng.integers(0, C, n - C)]
            X = rng.normal(size=(n, D))
            Q = rng.normal(size=(10, D))
            tr = LabeledEmbeddings(X, y)
            assert np.array_equal(simpleshot(tr, Q), ref_simpleshot(X, y, Q))
            k = int(rng.integers(1, n + 3))
            assert np.array_equal(knn_predict(tr, Q, k), ref_knn(X, y, Q, min(k, n)))

    def test_knn_all_majority(self):
        X = np.random.default_rng(0).normal(size=(5, 3))
        tr = LabeledEmbeddings(X, np.array([0, 0, 1, 1, 1]))
        assert np.all(knn_predict(tr, np.random.default_rng(1).normal(size=(7, 3)), k=5) == 1)

    def test_one_shot_agreement(self):
        rng = np.random.default_rng(4)
        tr = LabeledEmbeddings(rng.normal(size=(4, 5)), np.arange(4))
        Q = rng.normal(size=(50, 5))
        assert np.array_equal(simpleshot(tr, Q), knn_predict(tr, Q, k=1))

    def test_empty_class(self):
        with pytest.raises(DataError):
            simpleshot(LabeledEmbeddings(np.eye(2), np.array([0, 2])), np.eye(2))


class TestZeroShot:
    def test_templates(self):
        assert len(TEMPLATES) == 23 and all("CLASSNAME" in t for t in TEMPLATES)
        assert TEMPLATES[0] == "CLASSNAME." and TEMPLATES[-1] == "CLASSNAME is identified."

    def test_basis(self):
        assert zero_shot(np.array([0.0, 0.0, 1.0]), np.eye(3))[0] == 2
        assert zero_shot(np.array([[0.0, 0.0, 0.0, 1.0]]), np.eye(4)[:3])[0] == 0

    def test_random_and_scale_invariance(self):
        rng = np.random.default_rng(0)
        U, V = rng.normal(size=(20, 6)), rng.normal(size=(4, 6))
        ref = [int(np.argmax([u @ (v / np.linalg.norm(v)) for v in V])) for u in U]
        assert list(zero_shot(U, V)) == ref
        assert list(zero_shot(U * rng.uniform(0.1, 10, (20, 1)), V * rng.uniform(0.1, 10, (4, 1)))) == ref

    def test_ensemble_roundtrip(self, tmp_path):
        ens = PromptEnsemble.from_templates(["serous carcinoma", "sarcoma"], TEMPLATES[:3])
        assert ens.prompts[1][1] == "an image of sarcoma."
        ens.save(tmp_path / "bank.txt")
        back = PromptEnsemble.load(tmp_path / "bank.txt")
        assert back.class_names == ens.class_names and back.prompts == ens.prompts

    def test_resolve_normalizes(self):
        ens = PromptEnsemble.from_templates(["a", "b"], TEMPLATES[:2])
        ens.resolve(lambda ps: np.array([[len(p), 1.0 + i] for i, p in enumerate(ps)]))
        assert np.allclose(np.linalg.norm(ens.vectors, axis=1), 1.0)

    def test_empty(self):
        with pytest.raises(DataError):
            PromptEnsemble(["a"], [[]])


class TestFewShot:
    def _data(self):
        rng = np.random.default_rng(0)
        y = np.repeat(np.arange(3), 10)
        X = rng.normal(size=(30, 4)) + 3 * np.eye(4)[y]
        return LabeledEmbeddings(X, y), LabeledEmbeddings(X + 0.1, y, "test")

    def test_counts(self):
        pool, test = self._data()
        res = few_shot_protocol(pool, test, seed=1)
        assert sorted(res.runs) == [1, 2, 4, 8, 16, 32]
        assert all(len(v) == 50 for v in res.runs.values())
        for k in (1, 4):
            for idx in res.supports[k]:
                assert np.all(np.bincount(pool.labels[idx]) == k)

    def test_large_k_identical(self):
        pool, test = self._data()
        res = few_shot_protocol(pool, test, shots=(16, 32), n_runs=50, seed=2)
        for k in (16, 32):
            assert len(set(res.runs[k])) == 1

    def test_median_iqr(self):
        pool, test = self._data()
        res = few_shot_protocol(pool, test, shots=(1,), seed=3)
        v = sorted(res.runs[1])
        assert res.median(1) == (v[24] + v[25]) / 2
        q1 = v[12] + 0.25 * (v[13] - v[12])  # linear interpolation at rank 0.25*(n-1) = 12.25
        assert res.iqr(1)[0] == pytest.approx(q1)

    def test_linear_probe_variant(self):
        pool, test = self._data()
        res = few_shot_protocol(pool, test, shots=(2,), n_runs=3, evaluator="linear_probe")
        assert len(res.runs[2]) == 3


class TestSurvival:
    def test_grid(self):
        assert len(ALPHA_GRID) == 25 and ALPHA_GRID[0] == pytest.approx(10) and ALPHA_GRID[-1] == pytest.approx(1e5)

    def test_cindex_conventions(self):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        e = np.array([1, 1, 0, 1])
        assert c_index(np.zeros(4), t, e) == 0.5
        assert c_index(-t, t, e) == 1.0

    def test_cindex_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(3, 25))
            t = rng.integers(1, 8, n).astype(float)
            e = rng.integers(0, 2, n)
            r = rng.integers(0, 4, n).astype(float)
            try:
                ref = ref_cindex(r, t, e)
            except ZeroDivisionError:
                continue
            assert c_index(r, t, e) == pytest.approx(ref, abs=1e-12)

    def test_breslow_reference_and_gradient(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(15, 3))
        t = rng.integers(1, 6, 15).astype(float)  # ties
        e = rng.integers(0, 2, 15).astype(bool)
        beta = rng.normal(size=3)
        eta = X @ beta
        ll = 0.0
        for ti in np.unique(t[e]):
            D = (t == ti) & e
            ll += eta[D].sum() - D.sum() * np.log(np.exp(eta[t >= ti]).sum())
        val, g = cox_objective(beta, X, t, e, 0.3)
        assert val == pytest.approx(-ll / 15 + 0.15 * beta @ beta, abs=1e-12)
        num = np.array([(cox_objective(beta + d, X, t, e, 0.3)[0] - cox_objective(beta - d, X, t, e, 0.3)[0]) / 2e-6
                        for d in np.eye(3) * 1e-6])
        assert relative_error(g, num).max() < 1e-5

    def test_fit_recovers_direction(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(300, 2))
        t = rng.exponential(1 / np.exp(1.5 * X[:, 0]))
        beta = cox_fit(X, t, np.ones(300, bool), alpha=1e-3)
        assert beta[0] > 1.0 and abs(beta[1]) < 0.3

    def test_zero_events(self):
        with pytest.raises(DataError):
            cox_fit(np.ones((3, 1)), np.ones(3), np.zeros(3), 1.0)

    def test_site_folds_and_protocol(self):
        rng = np.random.default_rng(3)
        sites = rng.integers(0, 9, 80)
        folds = site_preserved_folds(sites)
        for s in np.unique(sites):
            assert len(set(folds[sites == s])) == 1
        assert set(folds) == set(range(5))
        X = rng.normal(size=(80, 3))
        t = rng.exponential(1 / np.exp(X[:, 0])) + 1e-3
        res = survival_eval(X, t, rng.random(80) < 0.8, folds, ALPHA_GRID[:3])
        assert len(res.table) == 3 and len(res.fold_cindex) == 5
        assert res.best_alpha == max(res.table, key=lambda a: np.mean(res.table[a]))

    def test_too_few_sites(self):
        with pytest.raises(DataError):
            site_preserved_folds([0, 1, 2, 0])


class TestBootstrap:
    def test_count_and_determinism(self):
        rng = np.random.default_rng(0)
        y, p = rng.integers(0, 3, 40), rng.integers(0, 3, 40)
        a = bootstrap_ci(p, y, balanced_accuracy, seed=5)
        b = bootstrap_ci(p, y, balanced_accuracy, seed=5)
        assert a.n == N_BOOTSTRAP == 1000
        assert a.mean == b.mean and a.std == b.std and np.array_equal(a.values, b.values)

    def test_perfect_zero_std(self):
        y = np.array([0, 1, 1, 0, 2])
        assert bootstrap_ci(y, y, balanced_accuracy, n=200).std == 0.0

    def test_redraw_undefined(self):
        s = np.r_[np.zeros(9), 1.0]
        y = np.r_[np.zeros(9, int), 1]
        res = bootstrap_ci(s, y, auroc, n=100, seed=0)
        assert res.n == 100 and res.redraws > 0

    def test_report_serialization(self):
        y = np.array([0, 1, 1, 0])
        rep = EvalReport.build("toy", y, y, {"balanced_accuracy": balanced_accuracy}, n_bootstrap=10)
        assert '"metric": "balanced_accuracy"' in rep.to_jsonl()
        assert rep.to_csv().splitlines()[1].startswith("toy,balanced_accuracy,1.0")
