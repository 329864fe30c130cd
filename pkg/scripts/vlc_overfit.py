"""Overfit the video-language model on 16 video-caption pairs; report retrieval and zero-shot accuracy."""
import argparse

from ivlab import data as D
from ivlab import evaluation as E
from ivlab import tensor as T
from ivlab import vlc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--lambda-cap", type=float, default=1.0)
    ap.add_argument("--template", default="a {}")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    vocab = D.Vocab()
    data = D.gen_corpus(D.SyntheticWorldSpec(num_classes=4, videos_per_class=4))
    cfg = vlc.MultimodalConfig(vocab_size=len(vocab), vid_depth=2, global_blocks=2, text_depth=1, cap_depth=1,
                               lambda_cap=args.lambda_cap)
    tc = vlc.VlcTrainConfig(steps=args.steps, lr=args.lr, warmup_steps=args.steps // 10, seed=args.seed)
    res = vlc.vlc_train(data, D.image_view(data), cfg, tc, vocab)
    for line in res.log[:: max(1, args.steps // 20)]:
        print(line)

    v = vlc.embed_clips(data.train, res.params, cfg, tc.video_frames)
    t = vlc.embed_texts([vocab.encode(c.caption) for c in data.train], res.params, cfg, vocab.pad)
    for k, val in E.retrieval_metrics(t @ v.T).items():
        print(f"{k} {val:.3f}")
    _, acc = E.zero_shot_classify(data.train, data.label_names, res.params, cfg, vocab, args.template,
                                  tc.video_frames)
    print(f"zero-shot top-1 {acc:.3f}")

    Pt = T.param_tensors(res.params, ())
    enc = vlc.encode_video(vlc.batch_frames(data.train, tc.video_frames, 1), Pt, cfg)
    decoded = vlc.greedy_decode(enc.final_tokens, Pt, cfg, vocab)
    exact = sum(tuple(c.caption) == vocab.decode(d) for c, d in zip(data.train, decoded))
    print(f"greedy captions exact {exact}/{len(data.train)}")


if __name__ == "__main__":
    main()
