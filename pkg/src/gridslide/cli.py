"""Command-line experiment driver.

Every subcommand resolves a flat ``key=value`` configuration (defaults <
``--config`` file < command-line overrides), runs one stage, writes its
outputs atomically into ``out`` and records an experiment manifest
(``manifest.json``) from which the run can be replayed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

import gridslide
from gridslide import config as C
from gridslide._io import atomic_write_text, sha256_file
from gridslide.errors import ConfigError, DataError, MetricUndefined, NumericalError
from gridslide.rng import stream

log = logging.getLogger("gridslide")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.gsld"
MODEL_META = "model.json"
PATH_KEYS = ("out", "corpus", "model", "init", "embeddings")


class UsageError(ConfigError):
    pass


# -- run bookkeeping ----------------------------------------------------------------

@dataclass
class ExperimentManifest:
    command: str
    config: dict[str, Any]
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)  # path relative to out -> sha256
    checkpoints: list[str] = field(default_factory=list)
    seed: int = 0
    version: str = gridslide.__version__
    environment: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        cfg = {k: C.format_value(v) for k, v in sorted(self.config.items())}
        body = dict(command=self.command, config=cfg, inputs=self.inputs, outputs=self.outputs,
                    checkpoints=self.checkpoints, seed=self.seed, version=self.version, environment=self.environment)
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentManifest":
        try:
            body = json.loads(Path(path).read_text())
            return cls(body["command"], dict(body["config"]), body.get("inputs", {}), body.get("outputs", {}),
                       body.get("checkpoints", []), int(body.get("seed", 0)), body.get("version", ""),
                       body.get("environment", {}))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: not an experiment manifest ({exc})") from None


class Run:
    """Tracks the files a command reads and writes."""

    def __init__(self, command: str, cfg: dict[str, Any]):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.manifest = ExperimentManifest(command, cfg, seed=int(cfg.get("seed", 0)), environment={
            "python": platform.python_version(), "numpy": np.__version__})

    def input(self, key_or_path: str, required: bool = True) -> Path | None:
        raw = self.cfg.get(key_or_path, key_or_path)
        if not raw:
            if required:
                raise UsageError(f"missing required setting {key_or_path!r}")
            return None
        p = Path(raw)
        if not p.exists():
            raise FileNotFoundError(f"no such file or directory: {p}")
        files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != MANIFEST) if p.is_dir() else [p]
        for q in files:
            self.manifest.inputs[str(q)] = sha256_file(q)
        return p

    def path(self, name: str) -> Path:
        return self.out / name

    def wrote(self, name: str, checkpoint: bool = False) -> Path:
        p = self.path(name)
        self.manifest.outputs[name] = sha256_file(p)
        if checkpoint:
            self.manifest.checkpoints.append(name)
        return p

    def write_text(self, name: str, text: str) -> Path:
        atomic_write_text(self.path(name), text)
        return self.wrote(name)

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        atomic_write_text(self.out / MANIFEST, self.manifest.to_json())


# -- corpus and model access -------------------------------------------------------

@dataclass
class Corpus:
    root: Path
    entries: list  # ManifestEntry
    splits: dict[str, str]
    class_names: list[str]

    @classmethod
    def open(cls, root: Path) -> "Corpus":
        from gridslide.feature_grid import read_manifest

        entries = read_manifest(root / "slides.tsv")
        splits = {}
        split_file = root / "splits.tsv"
        if split_file.exists():
            for line in split_file.read_text().splitlines():
                if line and not line.startswith("#"):
                    sid, sp = line.split("\t")
                    splits[sid] = sp
        names_file = root / "classes.txt"
        names = names_file.read_text().splitlines() if names_file.exists() else []
        return cls(root, entries, splits, names)

    def select(self, split: str) -> list:
        if split == "all":
            return list(self.entries)
        picked = [e for e in self.entries if self.splits.get(e.slide_id, "train") == split]
        if not picked:
            raise DataError(f"corpus {self.root} has no slides in split {split!r}")
        return picked

    def split_of(self, sid: str) -> str:
        return self.splits.get(sid, "train")

    def grid(self, entry):
        from gridslide.feature_grid import read_grid

        return read_grid(entry.path)

    def texts(self, name: str) -> dict[str, list[str]]:
        from gridslide.align import read_captions

        return read_captions(self.root / name)

    def survival(self) -> dict[str, tuple[float, bool, int]]:
        out = {}
        lines = (self.root / "survival.tsv").read_text().splitlines()
        for line in lines[1:]:
            sid, t, e, site = line.split("\t")
            out[sid] = (float(t), e == "1", int(site))
        return out


def _dtype(cfg) -> str:
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    return cfg["dtype"]


@dataclass
class Model:
    kind: str  # "pretrain" or "align"
    enc_cfg: Any
    params: dict
    student: dict | None = None
    text_cfg: Any = None
    vocab: Any = None
    stage: int = 1


def load_model(run: Run, key: str = "model", dtype: str = "float64") -> Model:
    from gridslide.align import TextConfig
    from gridslide.encoder import EncoderConfig
    from gridslide.numerics import Tensor, load_checkpoint
    from gridslide.text import Vocab

    root = run.input(key)
    if root.is_file():
        root = root.parent
    meta = json.loads((root / MODEL_META).read_text())
    arrays = load_checkpoint(root / CHECKPOINT, dtype=np.dtype(dtype))
    tensors = lambda pre: {k[len(pre):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(pre)}
    enc_cfg = EncoderConfig(**meta["encoder"])
    if meta["kind"] == "pretrain":
        return Model("pretrain", enc_cfg, tensors("teacher."), tensors("student."))
    text_cfg = TextConfig(**meta["text"])
    return Model("align", enc_cfg, tensors("params."), None, text_cfg, Vocab.load(root / "vocab.txt"),
                 int(meta.get("stage", 2)))


# -- subcommand definitions --------------------------------------------------------

def _common(out: str, **extra) -> dict[str, Any]:
    return {"out": out, "seed": 0, **extra}


def defaults_gen(_args) -> dict[str, Any]:
    from gridslide.synthetic import SyntheticCorpusSpec

    spec = {k: v for k, v in C.flatten(SyntheticCorpusSpec(), "corpus").items()
            if k not in ("corpus.templates", "corpus.seed")}
    return {**_common("corpus"), **spec, "test_per_class": 10}


def cmd_gen(run: Run) -> None:
    from gridslide.align import write_captions
    from gridslide.feature_grid import ManifestEntry, write_grid, write_manifest
    from gridslide.synthetic import CLASS_NAMES, SyntheticCorpusSpec, generate

    cfg = run.cfg
    spec = C.build(SyntheticCorpusSpec, cfg, "corpus", seed=cfg["seed"])
    test_spec = C.build(SyntheticCorpusSpec, cfg, "corpus", seed=cfg["seed"], slides_per_class=max(cfg["test_per_class"], 1))
    slides = [(s, "train") for s in generate(spec)]
    if cfg["test_per_class"] > 0:
        # disjoint slide indices, same class geometry
        slides += [(s, "test") for s in generate(test_spec, offset=spec.n_classes * spec.slides_per_class)]
    entries, splits, caps, reps, surv = [], [], [], [], ["slide_id\ttime\tevent\tsite"]
    for s, split in slides:
        name = f"grids/{s.slide_id}.grid"
        write_grid(run.path(name), s.grid)
        run.wrote(name)
        entries.append(ManifestEntry(s.slide_id, s.label, Path(name)))
        splits.append(f"{s.slide_id}\t{split}")
        caps += [(s.slide_id, i, t) for i, t in enumerate(s.captions)]
        reps += [(s.slide_id, i, t) for i, t in enumerate(s.reports)]
        surv.append(f"{s.slide_id}\t{s.time!r}\t{int(s.event)}\t{s.site}")
    write_manifest(run.path("slides.tsv"), entries)
    run.wrote("slides.tsv")
    run.write_text("splits.tsv", "#slide_id\tsplit\n" + "\n".join(splits) + "\n")
    write_captions(run.path("captions.tsv"), caps)
    run.wrote("captions.tsv")
    write_captions(run.path("reports.tsv"), reps)
    run.wrote("reports.tsv")
    run.write_text("survival.tsv", "\n".join(surv) + "\n")
    run.write_text("classes.txt", "\n".join(CLASS_NAMES[: spec.n_classes]) + "\n")
    print(f"wrote {len(slides)} slides to {run.out}")


def defaults_pretrain(_args) -> dict[str, Any]:
    from gridslide.encoder import EncoderConfig
    from gridslide.ibot import IbotConfig

    enc = {k: v for k, v in C.flatten(EncoderConfig.desk(), "enc").items() if k != "enc.input_dim"}
    ibot = {k: v for k, v in C.flatten(IbotConfig.desk(), "ibot").items() if k != "ibot.dtype"}
    return {**_common("runs/pretrain", corpus="", split="train", dtype="float32", checkpoint_every=0), **enc, **ibot}


def _pretrain_arrays(state) -> dict[str, np.ndarray]:
    arrays = {f"teacher.{k}": v.data for k, v in state.teacher.items()}
    arrays.update({f"student.{k}": v.data for k, v in state.student.items()})
    return arrays


def cmd_pretrain(run: Run) -> None:
    from gridslide.encoder import EncoderConfig
    from gridslide.ibot import IbotConfig, pretrain, trace_csv
    from gridslide.numerics import save_checkpoint

    cfg = run.cfg
    corpus = Corpus.open(run.input("corpus"))
    entries = corpus.select(cfg["split"])
    grids = [corpus.grid(e) for e in entries]
    enc_cfg = C.build(EncoderConfig, cfg, "enc", input_dim=grids[0].dim)
    ibot_cfg = C.build(IbotConfig, cfg, "ibot", dtype=_dtype(cfg))
    meta = {"kind": "pretrain", "encoder": enc_cfg.to_dict(), "ibot": ibot_cfg.to_dict()}
    every = cfg["checkpoint_every"]

    def on_epoch_end(epoch, state):
        if every > 0 and epoch >= 0 and (epoch + 1) % every == 0:
            name = f"checkpoint_epoch{epoch + 1:04d}.gsld"
            save_checkpoint(run.path(name), _pretrain_arrays(state))
            run.wrote(name, checkpoint=True)

    res = pretrain(grids, enc_cfg, ibot_cfg, seed=cfg["seed"], on_epoch_end=on_epoch_end)
    save_checkpoint(run.path(CHECKPOINT), _pretrain_arrays(res.state))
    run.wrote(CHECKPOINT, checkpoint=True)
    run.write_json(MODEL_META, meta)
    run.write_text("trace.csv", trace_csv(res.trace))
    last = res.trace[-1]
    print(f"pretrained {len(grids)} slides for {ibot_cfg.epochs} epochs; final loss {last['loss']:.4f}")


def defaults_align(args) -> dict[str, Any]:
    from gridslide.align import AlignConfig, TextConfig

    stage = int(getattr(args, "stage", 2) or 2)
    al = {k: v for k, v in C.flatten(AlignConfig.desk(stage), "align").items()
          if k not in ("align.stage", "align.dtype")}
    text = {k: v for k, v in C.flatten(TextConfig(1), "text").items() if k not in ("text.vocab_size", "text.width")}
    return {**_common(f"runs/align{stage}", corpus="", init="", split="train", dtype="float32", stage=stage,
                      region=16), **al, **text}


def cmd_align(run: Run) -> None:
    from gridslide.align import AlignConfig, Pair, TextConfig, align_train
    from gridslide.evaluation import TEMPLATES
    from gridslide.feature_grid import sample_region_crop
    from gridslide.numerics import save_checkpoint
    from gridslide.text import Vocab

    cfg = run.cfg
    stage = cfg["stage"]
    if stage not in (2, 3):
        raise UsageError("stage must be 2 or 3")
    corpus = Corpus.open(run.input("corpus"))
    init = load_model(run, "init", _dtype(cfg))
    entries = corpus.select(cfg["split"])
    acfg = C.build(AlignConfig, cfg, "align", stage=stage, dtype=_dtype(cfg))
    if stage == 2:
        texts = corpus.texts("captions.tsv")
        pairs = [Pair(e.slide_id, sample_region_crop(corpus.grid(e), cfg["region"], stream(cfg["seed"], "roi", i)),
                      texts[e.slide_id], e.label) for i, e in enumerate(entries)]
    else:
        texts = corpus.texts("reports.tsv")
        pairs = [Pair(e.slide_id, corpus.grid(e), texts[e.slide_id], e.label) for e in entries]
    if init.kind == "pretrain":
        if stage == 3:
            raise UsageError("stage 3 continues from a stage-2 alignment run")
        everything = [t for ts in corpus.texts("captions.tsv").values() for t in ts]
        everything += [t for ts in corpus.texts("reports.tsv").values() for t in ts]
        everything += [t.replace("CLASSNAME", n) for n in corpus.class_names for t in TEMPLATES]
        vocab = Vocab.build(everything)
        text_cfg = C.build(TextConfig, cfg, "text", vocab_size=len(vocab), width=init.enc_cfg.embed_dim)
        res = align_train(pairs, acfg, init.enc_cfg, init.student, vocab, text_cfg, seed=cfg["seed"])
    else:
        vocab, text_cfg = init.vocab, init.text_cfg
        res = align_train(pairs, acfg, init.enc_cfg, {}, vocab, text_cfg, seed=cfg["seed"], init=init.params)
    save_checkpoint(run.path(CHECKPOINT), {f"params.{k}": v.data for k, v in res.params.items()})
    run.wrote(CHECKPOINT, checkpoint=True)
    vocab.save(run.path("vocab.txt"))
    run.wrote("vocab.txt")
    run.write_json(MODEL_META, {"kind": "align", "stage": stage, "encoder": init.enc_cfg.to_dict(),
                                "text": text_cfg.to_dict(), "align": acfg.to_dict()})
    cols = list(res.trace[0])
    run.write_text("trace.csv", ",".join(cols) + "\n" + "".join(
        ",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n" for r in res.trace))
    last = res.trace[-1]
    print(f"stage {stage}: {len(pairs)} pairs, final contrastive {last['contrastive']:.4f} "
          f"caption {last['caption']:.4f} tau {last['tau']:.4f}")


def defaults_embed(args) -> dict[str, Any]:
    return _common("runs/embed", corpus="", model="", split="all", dtype="float64",
                   source=getattr(args, "source", None) or "cls")


def cmd_embed(run: Run) -> None:
    from gridslide.align import embed_slides
    from gridslide.encoder import encode, mean_pool_baseline
    from gridslide.retrieval import write_store

    cfg = run.cfg
    corpus = Corpus.open(run.input("corpus"))
    entries = corpus.select(cfg["split"])
    source = cfg["source"]
    if source == "mean":
        vecs = [mean_pool_baseline(corpus.grid(e), e.slide_id).vector for e in entries]
    elif source in ("cls", "pool"):
        model = load_model(run, "model", _dtype(cfg))
        if source == "cls":
            vecs = [encode(corpus.grid(e), model.params, model.enc_cfg)[0] for e in entries]
        else:
            if model.kind != "align":
                raise UsageError("source=pool needs an aligned model (run `align` first)")
            vecs = list(embed_slides(model.params, model.enc_cfg, model.text_cfg, [corpus.grid(e) for e in entries]))
    else:
        raise UsageError("source must be one of cls, pool, mean")
    write_store(run.path("embeddings.embs"), [e.slide_id for e in entries], [e.label for e in entries], np.stack(vecs))
    run.wrote("embeddings.embs")
    print(f"embedded {len(entries)} slides ({source}) -> {run.path('embeddings.embs')}")


def _load_split_embeddings(run: Run):
    """(train, test) LabeledEmbeddings from an EMBS file plus the corpus split table."""
    from gridslide.evaluation import LabeledEmbeddings
    from gridslide.retrieval import read_store

    ids, labels, V = read_store(run.input("embeddings"))
    corpus = Corpus.open(run.input("corpus"))
    split = np.array([corpus.split_of(s) for s in ids])
    tr, te = split == "train", split == "test"
    if not tr.any() or not te.any():
        raise DataError("embeddings must cover both the train and the test split")
    return (LabeledEmbeddings(V[tr], labels[tr]), LabeledEmbeddings(V[te], labels[te]),
            [i for i, m in zip(ids, te) if m])


def _metric_fns():
    from gridslide.evaluation import balanced_accuracy, weighted_f1

    return {"balanced_accuracy": balanced_accuracy, "weighted_f1": weighted_f1}


def defaults_probe(_args) -> dict[str, Any]:
    return _common("runs/probe", corpus="", embeddings="", val_fraction=0.0, n_bootstrap=1000)


def cmd_probe(run: Run) -> None:
    from gridslide.evaluation import EvalReport, LabeledEmbeddings, auroc_ovr, linear_probe

    cfg = run.cfg
    train, test, _ = _load_split_embeddings(run)
    val = None
    if cfg["val_fraction"] > 0:
        rng = stream(cfg["seed"], "val_split")
        is_val = np.zeros(len(train), bool)
        for c in np.unique(train.labels):
            members = rng.permutation(np.flatnonzero(train.labels == c))
            is_val[members[: int(round(cfg["val_fraction"] * members.size))]] = True
        val = LabeledEmbeddings(train.embeddings[is_val], train.labels[is_val])
        train = LabeledEmbeddings(train.embeddings[~is_val], train.labels[~is_val])
    res = linear_probe(train, test, val)
    extra = {"l2": res.l2}
    try:
        extra["auroc"] = auroc_ovr(res.probabilities, test.labels)
    except MetricUndefined:
        pass
    rep = EvalReport.build("linear_probe", res.predictions, test.labels, _metric_fns(), cfg["n_bootstrap"],
                           cfg["seed"], **extra)
    _write_report(run, rep)


def _write_report(run: Run, rep) -> None:
    rep.write(run.path("report"))
    run.wrote("report.jsonl")
    run.wrote("report.csv")
    if rep.extra:
        run.write_json("extra.json", rep.extra)
    for name, (point, mean, std) in rep.metrics.items():
        print(f"{rep.task} {name}: {point:.4f} (bootstrap {mean:.4f} +- {std:.4f})")


def defaults_fewshot(_args) -> dict[str, Any]:
    from gridslide.evaluation import N_RUNS, SHOTS

    return _common("runs/fewshot", corpus="", embeddings="", shots=tuple(SHOTS), n_runs=N_RUNS,
                   evaluator="simpleshot")


def cmd_fewshot(run: Run) -> None:
    from gridslide.evaluation import few_shot_protocol

    cfg = run.cfg
    train, test, _ = _load_split_embeddings(run)
    res = few_shot_protocol(train, test, cfg["shots"], cfg["n_runs"], cfg["evaluator"], cfg["seed"])
    runs = ["k,run,balanced_accuracy"] + [f"{k},{i},{v!r}" for k in res.runs for i, v in enumerate(res.runs[k])]
    run.write_text("runs.csv", "\n".join(runs) + "\n")
    summary = ["k,median,q1,q3"]
    for k in res.runs:
        q1, q3 = res.iqr(k)
        summary.append(f"{k},{res.median(k)!r},{q1!r},{q3!r}")
        print(f"{cfg['evaluator']} k={k}: median {res.median(k):.4f} IQR [{q1:.4f}, {q3:.4f}]")
    run.write_text("summary.csv", "\n".join(summary) + "\n")


def defaults_zeroshot(_args) -> dict[str, Any]:
    from gridslide.evaluation import TEMPLATES

    return _common("runs/zeroshot", corpus="", model="", split="test", n_templates=len(TEMPLATES),
                   dtype="float64", n_bootstrap=1000)


def cmd_zeroshot(run: Run) -> None:
    from gridslide.align import embed_slides, embed_texts
    from gridslide.evaluation import TEMPLATES, EvalReport, PromptEnsemble, zero_shot

    cfg = run.cfg
    model = load_model(run, "model", _dtype(cfg))
    if model.kind != "align":
        raise UsageError("zero-shot needs an aligned model")
    corpus = Corpus.open(run.input("corpus"))
    if not 1 <= cfg["n_templates"] <= len(TEMPLATES):
        raise ConfigError(f"n_templates must lie in [1, {len(TEMPLATES)}]")
    entries = corpus.select(cfg["split"])
    ens = PromptEnsemble.from_templates(corpus.class_names, TEMPLATES[: cfg["n_templates"]])
    ens.resolve(lambda ps: embed_texts(model.params, model.text_cfg, model.vocab, ps))
    ens.save(run.path("prompts.txt"))
    run.wrote("prompts.txt")
    emb = embed_slides(model.params, model.enc_cfg, model.text_cfg, [corpus.grid(e) for e in entries])
    labels = np.array([e.label for e in entries])
    rep = EvalReport.build("zero_shot", zero_shot(emb, ens), labels, _metric_fns(), cfg["n_bootstrap"], cfg["seed"],
                           n_templates=cfg["n_templates"])
    _write_report(run, rep)


def defaults_retrieve(_args) -> dict[str, Any]:
    return _common("runs/retrieve", corpus="", embeddings="", k=5)


def cmd_retrieve(run: Run) -> None:
    from gridslide.retrieval import build_index, query_all, read_store, slide_retrieval_metrics, write_results

    cfg = run.cfg
    ids, labels, V = read_store(run.input("embeddings"))
    corpus_path = run.input("corpus", required=False)
    if corpus_path is not None:
        corpus = Corpus.open(corpus_path)
        split = np.array([corpus.split_of(s) for s in ids])
        keys, queries = split == "train", split == "test"
        if not keys.any() or not queries.any():
            raise DataError("retrieval needs train (keys) and test (queries) slides")
        index = build_index(V[keys], labels[keys], [i for i, m in zip(ids, keys) if m])
        results = query_all(index, V[queries], labels[queries], [i for i, m in zip(ids, queries) if m], k=cfg["k"])
    else:
        index = build_index(V, labels, ids)
        results = query_all(index, V, labels, ids, k=cfg["k"], leave_one_out=True)
    write_results(run.path("results.csv"), results)
    run.wrote("results.csv")
    metrics = slide_retrieval_metrics(results)
    run.write_json("metrics.json", metrics)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))


def defaults_xmodal(_args) -> dict[str, Any]:
    return _common("runs/xmodal", corpus="", model="", split="test", texts="captions.tsv", variant=0,
                   dtype="float64")


def cmd_xmodal(run: Run) -> None:
    from gridslide.align import embed_slides, embed_texts
    from gridslide.retrieval import cross_modal_recall

    cfg = run.cfg
    model = load_model(run, "model", _dtype(cfg))
    if model.kind != "align":
        raise UsageError("cross-modal retrieval needs an aligned model")
    corpus = Corpus.open(run.input("corpus"))
    entries = corpus.select(cfg["split"])
    texts = corpus.texts(cfg["texts"])
    labels = np.array([e.label for e in entries])
    img = embed_slides(model.params, model.enc_cfg, model.text_cfg, [corpus.grid(e) for e in entries])
    txt = embed_texts(model.params, model.text_cfg, model.vocab,
                      [texts[e.slide_id][min(cfg["variant"], len(texts[e.slide_id]) - 1)] for e in entries])
    out = {"slide_to_text": cross_modal_recall(img, txt, labels, labels),
           "text_to_slide": cross_modal_recall(txt, img, labels, labels)}
    run.write_json("metrics.json", out)
    for direction, m in out.items():
        print(direction, " ".join(f"{k}={v:.4f}" for k, v in m.items()))


def defaults_survival(_args) -> dict[str, Any]:
    return _common("runs/survival", corpus="", embeddings="", n_folds=5)


def cmd_survival(run: Run) -> None:
    from gridslide.evaluation import site_preserved_folds, survival_eval
    from gridslide.retrieval import read_store

    cfg = run.cfg
    ids, _, V = read_store(run.input("embeddings"))
    surv = Corpus.open(run.input("corpus")).survival()
    missing = [s for s in ids if s not in surv]
    if missing:
        raise DataError(f"{len(missing)} embedded slides lack survival data (first: {missing[0]})")
    t = np.array([surv[s][0] for s in ids])
    e = np.array([surv[s][1] for s in ids])
    folds = site_preserved_folds([surv[s][2] for s in ids], cfg["n_folds"])
    res = survival_eval(V, t, e, folds)
    out = {"best_alpha": res.best_alpha, "fold_cindex": res.fold_cindex, "mean": res.mean,
           "std": float(np.std(res.fold_cindex)), "table": {repr(a): v for a, v in res.table.items()}}
    run.write_json("metrics.json", out)
    print(f"c-index {res.mean:.4f} +- {out['std']:.4f} (alpha {res.best_alpha:g})")


def defaults_generate(_args) -> dict[str, Any]:
    return _common("runs/generate", corpus="", model="", split="test", beams=5, max_len=64, dtype="float64")


def cmd_generate(run: Run) -> None:
    from gridslide.align import generate_reports, write_captions
    from gridslide.evaluation import bleu1, meteor_lite, rouge1

    cfg = run.cfg
    model = load_model(run, "model", _dtype(cfg))
    if model.kind != "align":
        raise UsageError("report generation needs an aligned model")
    corpus = Corpus.open(run.input("corpus"))
    entries = corpus.select(cfg["split"])
    texts = generate_reports(model.params, model.enc_cfg, model.text_cfg, model.vocab,
                             [corpus.grid(e) for e in entries], beams=cfg["beams"], max_len=cfg["max_len"])
    write_captions(run.path("generated.tsv"), [(e.slide_id, 0, t) for e, t in zip(entries, texts)])
    run.wrote("generated.tsv")
    refs = corpus.texts("reports.tsv")
    scores = {name: float(np.mean([fn(t, refs[e.slide_id][0]) for e, t in zip(entries, texts)]))
              for name, fn in (("bleu1", bleu1), ("rouge1", rouge1), ("meteor", meteor_lite))}
    run.write_json("metrics.json", scores)
    print(" ".join(f"{k}={v:.4f}" for k, v in scores.items()))


COMMANDS: dict[str, tuple[Callable, Callable, str]] = {
    "gen": (defaults_gen, cmd_gen, "write a synthetic corpus (grids, captions, reports, survival)"),
    "pretrain": (defaults_pretrain, cmd_pretrain, "self-distillation pretraining of the slide encoder"),
    "align": (defaults_align, cmd_align, "vision-language alignment (stage 2 on region crops, stage 3 on slides)"),
    "embed": (defaults_embed, cmd_embed, "write slide embeddings to an EMBS store"),
    "probe": (defaults_probe, cmd_probe, "logistic-regression linear probe"),
    "fewshot": (defaults_fewshot, cmd_fewshot, "few-shot protocol over repeated support draws"),
    "zeroshot": (defaults_zeroshot, cmd_zeroshot, "zero-shot classification with a prompt ensemble"),
    "retrieve": (defaults_retrieve, cmd_retrieve, "slide-to-slide retrieval"),
    "xmodal": (defaults_xmodal, cmd_xmodal, "cross-modal slide/text retrieval"),
    "survival": (defaults_survival, cmd_survival, "Cox survival evaluation with site-preserved folds"),
    "generate": (defaults_generate, cmd_generate, "beam-search report generation"),
}


# -- argument handling -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridslide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gridslide {gridslide.__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, _, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="configuration overrides")
        sp.add_argument("--config", help="flat key=value file layered over the defaults")
        sp.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--echo-config", action="store_true", help="print the resolved configuration and exit")
        sp.add_argument("--list-keys", action="store_true", help="print the valid keys with their defaults")
        if name == "align":
            sp.add_argument("--stage", type=int, choices=(2, 3), default=2)
        if name == "embed":
            sp.add_argument("--source", choices=("cls", "pool", "mean"))
    st = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    st.add_argument("--quick", action="store_true", help="skip the unit-test suite even if it is present")
    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="write into another directory instead of the recorded one")
    rp.add_argument("--verify", action="store_true", help="fail unless every output hash matches the manifest")
    return p


def _pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def resolve_config(args) -> dict[str, Any]:
    defaults = COMMANDS[args.command][0](args)
    file_values = C.read_file(args.config) if args.config else {}
    flags = _pairs(list(args.overrides) + list(args.sets))
    for key in ("seed", "out", "stage", "source"):
        val = getattr(args, key, None)
        if val is not None:
            flags[key] = str(val)
    if args.command == "align" and "stage" in file_values and getattr(args, "stage", None) is None:
        args.stage = int(file_values["stage"])
    cfg = C.resolve(defaults, file_values, flags)
    # absolute paths keep the manifest replayable from any working directory
    for key in PATH_KEYS:
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def execute(command: str, cfg: dict[str, Any]) -> Run:
    run = Run(command, cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    COMMANDS[command][1](run)
    run.finish()
    return run


def cmd_selftest(args) -> int:
    from gridslide.selftest import run_checks

    ok = run_checks()
    tests = Path(__file__).resolve().parents[2] / "tests"
    if not args.quick and tests.is_dir():
        print(f"running unit tests in {tests}")
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "not slow", str(tests)])
        ok = ok and proc.returncode == 0
    print("selftest", "passed" if ok else "FAILED")
    return EXIT_OK if ok else 1


def cmd_replay(args) -> int:
    man = ExperimentManifest.load(args.manifest)
    if man.command not in COMMANDS:
        raise DataError(f"manifest records unknown command {man.command!r}")
    ns = argparse.Namespace(command=man.command, stage=int(man.config.get("stage", 2)),
                            source=man.config.get("source"))
    defaults = COMMANDS[man.command][0](ns)
    values = dict(man.config)
    if args.out:
        values["out"] = args.out
    cfg = C.resolve(defaults, {}, values)
    run = execute(man.command, cfg)
    if args.verify:
        bad = sorted(k for k, h in man.outputs.items() if run.manifest.outputs.get(k) != h)
        if bad:
            print("replay differs in: " + ", ".join(bad), file=sys.stderr)
            return EXIT_DATA
        print(f"replay reproduced {len(man.outputs)} output file(s) bit-identically")
    return EXIT_OK


def _limit_threads():
    n = os.environ.get("GRIDSLIDE_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise UsageError(f"GRIDSLIDE_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(count, 1))


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        limiter = _limit_threads()
        try:
            if args.command == "selftest":
                return cmd_selftest(args)
            if args.command == "replay":
                return cmd_replay(args)
            cfg = resolve_config(args)
            if args.list_keys:
                sys.stdout.write(C.dump(COMMANDS[args.command][0](args)))
                return EXIT_OK
            if args.echo_config:
                sys.stdout.write(C.dump(cfg))
                return EXIT_OK
            execute(args.command, cfg)
            return EXIT_OK
        finally:
            if limiter is not None:
                limiter.unregister()
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"path error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, MetricUndefined) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
