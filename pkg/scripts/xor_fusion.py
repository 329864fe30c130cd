"""Complementarity experiment: fuse a motion-only and an appearance-only branch on the XOR task.

The masked encoder is grayscale (it sees motion, not colour); the multimodal
encoder sees a single frame (colour, not motion). Each is first post-trained on
its own bit, then frozen. Fused accuracy is compared with linear probes on each
branch's frozen features.
"""
import argparse

import numpy as np

from ivlab import data as D
from ivlab import fusion as F
from ivlab import mae
from ivlab import posttrain as PT
from ivlab import vlc


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--per-cell", type=int, default=16)
    ap.add_argument("--finetune-steps", type=int, default=300)
    ap.add_argument("--fuse-steps", type=int, default=200)
    ap.add_argument("--fuse-lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = D.gen_xor_corpus(per_cell=args.per_cell, test_per_cell=args.per_cell, num_frames=16, seed=args.seed)
    vocab = D.Vocab()
    mcfg = mae.MaeConfig(num_frames=8, channels=1, enc_dim=32, enc_depth=2, enc_heads=4, dec_depth=1)
    vcfg = vlc.MultimodalConfig(vid_dim=32, vid_depth=2, global_blocks=2, text_depth=1, cap_depth=1,
                                vocab_size=len(vocab))
    ft = PT.FinetuneConfig(steps=args.finetune_steps, base_lr=0.1, batch_size=16, head_dropout=0.0,
                           drop_path=0.0, repeat=1, layer_decay=1.0, scales=(1.0,), seed=args.seed)
    axis = D.relabel_by_meta(ds, "axis", ["horizontal", "vertical"])
    group = D.relabel_by_meta(ds, "group", ["warm", "cool"])
    rm = PT.finetune(mae.init_params(mcfg, np.random.default_rng(1)), PT.Backbone("mae", mcfg, 8, 2), axis, ft)
    rv = PT.finetune(vlc.init_params(vcfg, np.random.default_rng(2)), PT.Backbone("vlc", vcfg, 1, 1), group, ft)
    print(f"axis head final loss {rm.losses[-1]:.4f}, colour head final loss {rv.losses[-1]:.4f}")
    mp = {k: v for k, v in rm.params.items() if k.startswith("mae.")}
    vp = {k: v for k, v in rv.params.items() if k.startswith("vlc.")}

    cfg = F.FusionConfig(num_classes=2, steps=args.fuse_steps, batch_size=32, lr=args.fuse_lr, mm_frames=1,
                         mm_rate=1, seed=args.seed)
    ytr = np.array([c.labels[0] for c in ds.train])
    yte = np.array([c.labels[0] for c in ds.test])
    for branch in ("mae", "mm"):
        ftr = F.branch_features({**mp, **vp}, ds.train, branch, mcfg, vcfg, cfg)
        fte = F.branch_features({**mp, **vp}, ds.test, branch, mcfg, vcfg, cfg)
        probe = F.linear_probe(ftr, ytr)
        print(f"{branch:>5} probe  train {F.probe_accuracy(probe, ftr, ytr):.3f}  "
              f"test {F.probe_accuracy(probe, fte, yte):.3f}")
    res = F.interaction_train(mp, vp, ds, mcfg, vcfg, cfg)
    for split, clips, y in (("train", ds.train, ytr), ("test", ds.test, yte)):
        out = F.predict(res.params, clips, mcfg, vcfg, cfg)
        acc = float(np.mean(np.argmax(out.z_fused.data, 1) == y))
        print(f"fused {split} {acc:.3f}")
    print(f"lambda {float(res.params['fuse.lambda']):.3f}")


if __name__ == "__main__":
    main()
