"""Upscale a finetuned toy model's position table 2x and check predictions on upsampled inputs."""
import argparse
from dataclasses import replace

import numpy as np

from ivlab import data as D
from ivlab import evaluation as E
from ivlab import mae
from ivlab import posttrain as PT


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task", choices=("colour", "shape"), default="colour")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--factor", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = D.gen_corpus(D.SyntheticWorldSpec(num_classes=4, videos_per_class=8, seed=args.seed))
    if args.task == "colour":
        names = list(D.COLORS)
        ds = D.DatasetSpec("colour", [replace(c, labels=(names.index(c.meta["color"]),)) for c in base.train],
                           [], names)
    else:
        ds = base
    cfg = mae.MaeConfig(num_frames=8, enc_dim=32, enc_depth=2, enc_heads=4, dec_depth=1)
    bb = PT.Backbone("mae", cfg, 8, 2)
    fc = PT.FinetuneConfig(steps=args.steps, base_lr=0.1, batch_size=8, head_dropout=0.0, drop_path=0.0,
                           repeat=1, layer_decay=1.0, scales=(1.0,), seed=args.seed)
    res = PT.finetune(mae.init_params(cfg, np.random.default_rng(args.seed)), bb, ds, fc)
    head = PT.HeadSpec(ds.name, len(ds.label_names))
    before = PT.predict_logits(res.params, bb, head, ds.train)

    size = tuple(s * args.factor for s in cfg.frame_size)
    P2, cfg2 = E.resize_mae_pos(res.params, cfg, size)
    big = [replace(c, frames=D.resize_bilinear(c.frames, size)) for c in ds.train]
    after = PT.predict_logits(P2, PT.Backbone("mae", cfg2, 8, 2), head, big, batch=8)
    n = len(ds.train)
    print(f"task {args.task}: train top-1 {PT.top1(before, ds.train):.3f} at {cfg.frame_size}, "
          f"{PT.top1(after, big):.3f} at {size}")
    print(f"predictions changed {int(np.sum(np.argmax(before, 1) != np.argmax(after, 1)))}/{n}")


if __name__ == "__main__":
    main()
