"""Stage-1 pretraining on the synthetic corpus with SimpleShot tracking.

Reports the balanced accuracy of teacher CLS embeddings of held-out full
grids (support = training slides) before training and after selected epochs,
next to the mean-pool baseline and the anti-collapse statistics.

    python scripts/stage1_simpleshot.py --epochs 10 --signal 4
    python scripts/stage1_simpleshot.py --epochs 10 --signal 0   # mean-matched classes
"""
import argparse
import math
import time

import numpy as np

from gridslide.encoder import EncoderConfig, encode, mean_pool_baseline
from gridslide.evaluation import LabeledEmbeddings, balanced_accuracy, simpleshot
from gridslide.ibot import IbotConfig, pretrain
from gridslide.synthetic import SyntheticCorpusSpec, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--signal", type=float, default=4.0)
    ap.add_argument("--subtype-spread", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=0, help="also evaluate every N epochs (0: first/last only)")
    args = ap.parse_args()

    kw = dict(signal=args.signal, subtype_spread=args.subtype_spread, seed=args.seed)
    train = generate(SyntheticCorpusSpec(**kw))
    test = generate(SyntheticCorpusSpec(slides_per_class=10, **kw), offset=100_000)
    y_tr, y_te = np.array([s.label for s in train]), np.array([s.label for s in test])
    enc_cfg, cfg = EncoderConfig.desk(), IbotConfig.desk(epochs=args.epochs)

    def score(embed):
        return balanced_accuracy(simpleshot(LabeledEmbeddings(embed(train), y_tr), embed(test)), y_te)

    print(f"mean-pool SimpleShot {score(lambda S: np.stack([mean_pool_baseline(s.grid).vector for s in S])):.3f}")

    def on_epoch_end(epoch, state):
        last = epoch in (-1, args.epochs - 1)
        periodic = args.eval_every and epoch >= 0 and (epoch + 1) % args.eval_every == 0
        if last or periodic:
            acc = score(lambda S: np.stack([encode(s.grid, state.teacher, enc_cfg)[0] for s in S]))
            print(f"epoch {epoch:3d} teacher CLS SimpleShot {acc:.3f}", flush=True)

    t0 = time.time()
    res = pretrain([s.grid for s in train], enc_cfg, cfg, seed=args.seed, on_epoch_end=on_epoch_end)
    ln_p = math.log(cfg.prototype_dim)
    print(f"trained {args.epochs} epochs in {time.time() - t0:.0f}s; "
          f"min teacher prototype std {min(r['teacher_proto_std'] for r in res.trace):.2e}; "
          f"final cls loss {res.trace[-1]['cls_loss']:.3f} (ln P = {ln_p:.3f})")


if __name__ == "__main__":
    main()
