import json

import numpy as np
import pytest

from gridslide._io import sha256_file
from gridslide.cli import ExperimentManifest, main
from gridslide.feature_grid import FeatureGrid, read_grid, read_manifest, write_grid
from gridslide.retrieval import read_store
from gridslide.synthetic import CLASS_NAMES

TINY_CORPUS = ["corpus.n_classes=3", "corpus.slides_per_class=6", "corpus.grid_min=10", "corpus.grid_max=14",
               "corpus.dim=16", "test_per_class=3"]
TINY_ENCODER = ["enc.layers=1", "enc.heads=2", "enc.mlp_hidden=32", "ibot.epochs=2", "ibot.warmup_epochs=1",
                "ibot.prototype_dim=64", "ibot.head_hidden=32", "ibot.head_bottleneck=16", "ibot.batch_size=6"]
TINY_TEXT = ["align.epochs=2", "text.text_layers=1", "text.decoder_layers=1", "text.n_recon=8",
             "text.mlp_hidden=32", "region=8"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert run("gen", "--out", out, *TINY_CORPUS) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(corpus):
    out = corpus.parent / "pre"
    assert run("pretrain", "--out", out, f"corpus={corpus}", *TINY_ENCODER, "checkpoint_every=1") == 0
    return out


@pytest.fixture(scope="module")
def aligned(corpus, pretrained):
    out = corpus.parent / "align2"
    assert run("align", "--stage", 2, "--out", out, f"corpus={corpus}", f"init={pretrained}", *TINY_TEXT) == 0
    return out


class TestGen:
    def test_layout(self, corpus):
        entries = read_manifest(corpus / "slides.tsv")
        assert len(entries) == 3 * 6 + 3 * 3
        assert len({e.slide_id for e in entries}) == len(entries)
        splits = [line.split("\t")[1] for line in (corpus / "splits.tsv").read_text().splitlines()[1:]]
        assert splits.count("train") == 18 and splits.count("test") == 9
        assert (corpus / "classes.txt").read_text().splitlines() == list(CLASS_NAMES[:3])
        assert read_grid(entries[0].path).dim == 16
        header = (corpus / "survival.tsv").read_text().splitlines()[0]
        assert header == "slide_id\ttime\tevent\tsite"

    def test_same_seed_is_byte_identical(self, corpus, tmp_path):
        assert run("gen", "--out", tmp_path / "again", *TINY_CORPUS) == 0
        first = json.loads((corpus / "manifest.json").read_text())["outputs"]
        second = json.loads((tmp_path / "again" / "manifest.json").read_text())["outputs"]
        assert first == second

    def test_other_seed_differs(self, corpus, tmp_path):
        assert run("gen", "--out", tmp_path / "s1", "--seed", 1, *TINY_CORPUS) == 0
        a = sha256_file(corpus / "grids" / "slide_00000.grid")
        assert a != sha256_file(tmp_path / "s1" / "grids" / "slide_00000.grid")

    def test_invalid_spec_is_usage_error(self, tmp_path):
        assert run("gen", "--out", tmp_path, "corpus.signal=-1") == 2


class TestConfig:
    def test_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# file layer\nseed=3\nibot.epochs=5\nibot.batch_size=4\n")
        assert run("pretrain", "--config", cfg, "--seed", 9, "ibot.epochs=4", "--echo-config") == 0
        resolved = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
        assert resolved["seed"] == "9"  # flag beats file
        assert resolved["ibot.epochs"] == "4"  # override beats file
        assert resolved["ibot.batch_size"] == "4"  # file beats default
        assert resolved["ibot.lr_peak"] == "0.002"  # untouched default

    def test_unknown_key_lists_valid_keys(self, capsys):
        assert run("probe", "bogus=1") == 2
        err = capsys.readouterr().err
        assert "bogus" in err and "val_fraction" in err and "n_bootstrap" in err

    def test_bad_value_and_bad_syntax(self, tmp_path):
        assert run("pretrain", "ibot.epochs=many", "--echo-config") == 2
        assert run("pretrain", "justaword") == 2
        assert run("align", "--stage", 4) == 2
        bad = tmp_path / "bad.cfg"
        bad.write_text("no equals sign\n")
        assert run("probe", "--config", bad) == 2

    def test_missing_inputs_are_path_errors(self, tmp_path):
        assert run("pretrain", "--out", tmp_path / "o", f"corpus={tmp_path / 'none'}") == 3
        assert run("retrieve", "--out", tmp_path / "o", f"embeddings={tmp_path / 'x.embs'}") == 3
        assert run("probe", "--config", tmp_path / "absent.cfg") == 3

    def test_missing_required_setting(self, tmp_path):
        assert run("pretrain", "--out", tmp_path) == 2

    def test_list_keys(self, capsys):
        assert run("embed", "--list-keys") == 0
        assert "source=cls" in capsys.readouterr().out


class TestPipeline:
    def test_pretrain_outputs(self, pretrained):
        assert sorted(p.name for p in pretrained.iterdir()) == [
            "checkpoint.gsld", "checkpoint_epoch0001.gsld", "checkpoint_epoch0002.gsld", "manifest.json",
            "model.json", "trace.csv"]
        man = ExperimentManifest.load(pretrained / "manifest.json")
        assert man.command == "pretrain" and man.seed == 0
        assert man.checkpoints == ["checkpoint_epoch0001.gsld", "checkpoint_epoch0002.gsld", "checkpoint.gsld"]
        assert any(k.endswith("slides.tsv") for k in man.inputs)
        header = (pretrained / "trace.csv").read_text().splitlines()[0]
        assert header == "step,cls_loss,mim_loss,lr,wd,momentum,teacher_temp"

    def test_pretrain_seed_determinism(self, corpus, tmp_path):
        hashes = []
        for name in ("a", "b"):
            assert run("pretrain", "--seed", 7, "--out", tmp_path / name, f"corpus={corpus}", *TINY_ENCODER) == 0
            hashes.append(sha256_file(tmp_path / name / "checkpoint.gsld"))
        assert hashes[0] == hashes[1]

    def test_embed_then_evaluate(self, corpus, pretrained, tmp_path):
        emb = tmp_path / "emb"
        assert run("embed", "--out", emb, f"corpus={corpus}", f"model={pretrained}") == 0
        ids, labels, V = read_store(emb / "embeddings.embs")
        assert len(ids) == 27 and V.shape == (27, 32) and np.isfinite(V).all()
        store = f"embeddings={emb / 'embeddings.embs'}"
        assert run("retrieve", "--out", tmp_path / "r", f"corpus={corpus}", store) == 0
        metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
        assert set(metrics) == {"acc@1", "acc@3", "acc@5", "mvacc@5"}
        assert metrics["mvacc@5"] <= metrics["acc@5"]
        assert len((tmp_path / "r" / "results.csv").read_text().splitlines()) == 1 + 9 * 5
        assert run("probe", "--out", tmp_path / "p", f"corpus={corpus}", store, "n_bootstrap=20") == 0
        rows = [json.loads(x) for x in (tmp_path / "p" / "report.jsonl").read_text().splitlines()]
        assert {r["metric"] for r in rows} == {"balanced_accuracy", "weighted_f1"}
        assert run("fewshot", "--out", tmp_path / "f", f"corpus={corpus}", store, "shots=1,2", "n_runs=3") == 0
        assert len((tmp_path / "f" / "runs.csv").read_text().splitlines()) == 1 + 2 * 3
        assert run("survival", "--out", tmp_path / "s", f"corpus={corpus}", store, "n_folds=3") == 0
        assert 0.0 <= json.loads((tmp_path / "s" / "metrics.json").read_text())["mean"] <= 1.0

    def test_mean_pool_separates_classes(self, corpus, tmp_path):
        assert run("embed", "--source", "mean", "--out", tmp_path / "m", f"corpus={corpus}") == 0
        store = f"embeddings={tmp_path / 'm' / 'embeddings.embs'}"
        assert run("retrieve", "--out", tmp_path / "r", f"corpus={corpus}", store) == 0
        assert json.loads((tmp_path / "r" / "metrics.json").read_text())["acc@1"] == 1.0

    def test_align_and_multimodal_commands(self, corpus, aligned, tmp_path):
        assert (aligned / "vocab.txt").read_text().startswith("<pad>\n")
        for src in ("cls", "pool"):
            assert run("embed", "--source", src, "--out", tmp_path / src, f"corpus={corpus}", f"model={aligned}") == 0
        assert run("zeroshot", "--out", tmp_path / "z", f"corpus={corpus}", f"model={aligned}", "n_templates=3",
                   "n_bootstrap=10") == 0
        prompts = (tmp_path / "z" / "prompts.txt").read_text()
        assert prompts.count("[") == 3
        assert run("xmodal", "--out", tmp_path / "x", f"corpus={corpus}", f"model={aligned}") == 0
        assert set(json.loads((tmp_path / "x" / "metrics.json").read_text())) == {"slide_to_text", "text_to_slide"}
        stage3 = tmp_path / "align3"
        assert run("align", "--stage", 3, "--out", stage3, f"corpus={corpus}", f"init={aligned}",
                   "align.epochs=1", "align.crop_side=12") == 0
        gen = [run("generate", "--out", tmp_path / f"g{i}", f"corpus={corpus}", f"model={stage3}", "max_len=8")
               for i in range(2)]
        assert gen == [0, 0]
        assert sha256_file(tmp_path / "g0" / "generated.tsv") == sha256_file(tmp_path / "g1" / "generated.tsv")

    def test_wrong_model_kind(self, corpus, pretrained, tmp_path):
        assert run("zeroshot", "--out", tmp_path, f"corpus={corpus}", f"model={pretrained}") == 2
        assert run("embed", "--source", "pool", "--out", tmp_path, f"corpus={corpus}", f"model={pretrained}") == 2
        assert run("align", "--stage", 3, "--out", tmp_path, f"corpus={corpus}", f"init={pretrained}") == 2

    def test_replay_reproduces_outputs(self, pretrained, tmp_path):
        assert run("replay", pretrained / "manifest.json", "--out", tmp_path / "again", "--verify") == 0
        assert sha256_file(tmp_path / "again" / "checkpoint.gsld") == sha256_file(pretrained / "checkpoint.gsld")

    def test_replay_detects_drift(self, pretrained, tmp_path):
        man = json.loads((pretrained / "manifest.json").read_text())
        man["outputs"]["trace.csv"] = "0" * 64
        doctored = tmp_path / "manifest.json"
        doctored.write_text(json.dumps(man))
        assert run("replay", doctored, "--out", tmp_path / "again", "--verify") == 3

    def test_nan_features_abort_with_numerical_code(self, corpus, tmp_path, capsys):
        bad = tmp_path / "corpus"
        assert run("gen", "--out", bad, *TINY_CORPUS) == 0
        path = bad / "grids" / "slide_00003.grid"
        g = read_grid(path)
        feats = g.features.copy()
        feats[g.mask] = np.nan
        write_grid(path, FeatureGrid(feats, g.mask))
        assert run("pretrain", "--out", tmp_path / "pre", f"corpus={bad}", *TINY_ENCODER) == 4
        assert "non-finite" in capsys.readouterr().err


def test_selftest_quick(capsys):
    assert run("selftest", "--quick") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 9


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("GRIDSLIDE_THREADS", "1")
    assert run("gen", "--out", tmp_path, "corpus.n_classes=2", "corpus.slides_per_class=2", "test_per_class=0") == 0
    monkeypatch.setenv("GRIDSLIDE_THREADS", "lots")
    assert run("gen", "--out", tmp_path) == 2
