"""Evidential open-set recognition: hold out one shape class, train on the rest, score uncertainty.

Every shape in turn can be held out (``--holdout``); the reported numbers are
the pairwise AUC of unknown-vs-known uncertainty and the fraction of unknown
clips rejected by the threshold that keeps 95% of known clips.
"""
import argparse
from dataclasses import replace

import numpy as np

from ivlab import data as D
from ivlab import evaluation as E
from ivlab import mae
from ivlab import posttrain as PT


def run(holdout: int, args) -> tuple[float, float, float]:
    full = D.gen_corpus(D.SyntheticWorldSpec(num_classes=4, videos_per_class=args.videos, test_per_class=8,
                                             seed=args.seed))
    order = [c for c in range(4) if c != holdout] + [holdout]
    remap = {old: new for new, old in enumerate(order)}
    relabel = lambda cs: [replace(c, labels=(remap[c.labels[0]],)) for c in cs]  # noqa: E731
    train, test = relabel(full.train), relabel(full.test)
    known = D.DatasetSpec("known", [c for c in train if c.labels[0] < 3], [c for c in test if c.labels[0] < 3],
                          [full.label_names[o] for o in order[:3]])
    unknown = [c for c in train + test if c.labels[0] == 3]
    cfg = mae.MaeConfig(num_frames=8, enc_dim=32, enc_depth=2, enc_heads=4, dec_depth=1, normalize_targets=False)
    params = mae.init_params(cfg, np.random.default_rng(args.seed))
    if args.pretrain_steps:
        tc = mae.MaeTrainConfig(steps=args.pretrain_steps, lr=1e-3, scales=(1.0,), seed=args.seed)
        params = mae.mae_train(known, cfg, tc).params
    bb = PT.Backbone("mae", cfg, 8, 2)
    reg = {} if not args.no_reg else dict(head_dropout=0.0, drop_path=0.0, repeat=1, layer_decay=1.0, scales=(1.0,))
    fc = PT.FinetuneConfig(steps=args.steps, base_lr=args.base_lr, batch_size=8, loss="edl", seed=args.seed, **reg)
    res = PT.finetune(params, bb, known, fc)
    head = PT.HeadSpec(known.name, 3)
    lk = PT.predict_logits(res.params, bb, head, known.test)
    uk = E.edl_head(lk).uncertainty
    uu = E.edl_head(PT.predict_logits(res.params, bb, head, unknown)).uncertainty
    threshold, auc = E.openset_eval(uk, uu, keep=0.95)
    return auc, float(np.mean(uu > threshold)), PT.top1(lk, known.test)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--holdout", type=int, nargs="*", default=[0, 1, 2, 3])
    ap.add_argument("--pretrain-steps", type=int, default=300)
    ap.add_argument("--videos", type=int, default=8, help="training clips per class")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--base-lr", type=float, default=0.1)
    ap.add_argument("--no-reg", action="store_true", help="drop dropout, drop-path, repeats and crops")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for h in args.holdout:
        auc, rejected, acc = run(h, args)
        print(f"holdout {D.SHAPES[h]:>8}  auc {auc:.3f}  rejected {rejected:.2f}  known top-1 {acc:.2f}")


if __name__ == "__main__":
    main()
