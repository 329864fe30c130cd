"""Overfit the masked autoencoder on a handful of clips and print the loss curve."""
import argparse
import time

from ivlab import data as D
from ivlab import mae


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clips", type=int, default=8)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--mask-ratio", type=float, default=0.9)
    ap.add_argument("--normalize-targets", action="store_true")
    ap.add_argument("--zero-init-head", action="store_true")
    ap.add_argument("--every", type=int, default=25)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    classes = 4
    data = D.gen_corpus(D.SyntheticWorldSpec(num_classes=classes, videos_per_class=max(1, args.clips // classes)))
    cfg = mae.MaeConfig(enc_dim=64, enc_depth=2, dec_dim=32, dec_depth=4, mask_ratio=args.mask_ratio,
                        normalize_targets=args.normalize_targets, zero_init_head=args.zero_init_head)
    tc = mae.MaeTrainConfig(steps=args.steps, lr=args.lr, scales=(1.0,), random_start=False, seed=args.seed)
    t0 = time.time()
    res = mae.mae_train(data, cfg, tc)
    for i in range(0, len(res.losses), args.every):
        print(f"step {i:4d} loss {res.losses[i]:.5f}")
    first, last = res.losses[0], res.losses[-1]
    print(f"final {last:.5f}  ratio {last / first:.4f}  clips {len(data.train)}  {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
