"""Small two-class pretraining runs: does Stage-1 improve SimpleShot over init?

    python scripts/two_class_smoke.py --signal 1.0 --seeds 0 1 --epochs 30
"""
import argparse
import time

import numpy as np

from gridslide.encoder import EncoderConfig, encode, mean_pool_baseline
from gridslide.evaluation import LabeledEmbeddings, balanced_accuracy, simpleshot
from gridslide.ibot import IbotConfig, pretrain
from gridslide.synthetic import SyntheticCorpusSpec, generate


def run(signal, spread, epochs, seed):
    kw = dict(n_classes=2, slides_per_class=20, grid_min=16, grid_max=20, dim=16, signal=signal,
              subtype_spread=spread, seed=seed)
    train, test = generate(SyntheticCorpusSpec(**kw)), generate(SyntheticCorpusSpec(**kw), offset=10_000)
    y_tr, y_te = np.array([s.label for s in train]), np.array([s.label for s in test])
    enc = EncoderConfig(layers=2, heads=2, head_dim=16, mlp_hidden=64, input_dim=16, drop_path_rate=0.0)
    cfg = IbotConfig.desk(epochs=epochs, warmup_epochs=2, warmup_teacher_temp_epochs=2, freeze_last_layer_epochs=1,
                          batch_size=8, prototype_dim=256)

    def score(embed):
        return balanced_accuracy(simpleshot(LabeledEmbeddings(embed(train), y_tr), embed(test)), y_te)

    acc = {}

    def on_epoch_end(epoch, state):
        if epoch in (-1, epochs - 1):
            acc[epoch] = score(lambda S: np.stack([encode(s.grid, state.teacher, enc)[0] for s in S]))

    t0 = time.time()
    pretrain([s.grid for s in train], enc, cfg, seed=0, on_epoch_end=on_epoch_end)
    mean = score(lambda S: np.stack([mean_pool_baseline(s.grid).vector for s in S]))
    print(f"signal {signal} spread {spread} seed {seed}: init {acc[-1]:.3f} -> trained {acc[epochs - 1]:.3f} "
          f"(mean pool {mean:.3f}, {time.time() - t0:.0f}s)", flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--signal", type=float, nargs="+", default=[0.5, 1.0])
    ap.add_argument("--spread", type=float, default=2.0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    args = ap.parse_args()
    for signal in args.signal:
        for seed in args.seeds:
            run(signal, args.spread, args.epochs, seed)


if __name__ == "__main__":
    main()
