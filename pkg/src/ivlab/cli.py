"""Command-line entry point: ``ivlab <stage> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import evaluation as E
from . import fusion as F
from . import mae, vlc
from . import posttrain as PT
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (DataError, DatasetSpec, SyntheticWorldSpec, Vocab, gen_corpus, gen_xor_corpus, image_view,
                   load_dataset, save_dataset)
from .tensor import NumericError

STAGES = ("gen-data", "pretrain-mae", "pretrain-vlc", "posttrain", "cotrain", "fuse", "interp-pe", "wise-ft", "eval")

MAE_KEYS = ("frame_size", "mae_channels", "mae_frames", "mae_rate", "tube_t", "tube_s", "enc_dim", "enc_depth",
            "enc_heads", "dec_dim", "dec_depth", "dec_heads", "mask_ratio", "normalize_targets")
VLC_KEYS = ("frame_size", "patch", "vid_dim", "vid_depth", "vid_heads", "global_blocks", "text_dim", "text_depth",
            "embed_dim", "temperature", "cap_depth", "cap_dim", "lambda_cap", "vlc_frames", "vlc_rate")
HEAD_KEYS = ("backbone", "multi_label")
OUTPUT_KEYS = ("out", "report")  # where results go never changes what they are


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ivlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", default=None, help="key=value config file")
        for key, _ in C.RunConfig().items():
            names = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
            p.add_argument(*names, dest=key, default=argparse.SUPPRESS, metavar="V")
    return parser


# config <-> models -----------------------------------------------------------------

def mae_config(rc: C.RunConfig) -> mae.MaeConfig:
    return mae.MaeConfig(num_frames=rc.mae_frames, frame_size=(rc.frame_size, rc.frame_size),
                         channels=rc.mae_channels, tube=(rc.tube_t, rc.tube_s, rc.tube_s), enc_dim=rc.enc_dim,
                         enc_depth=rc.enc_depth, enc_heads=rc.enc_heads, dec_dim=rc.dec_dim, dec_depth=rc.dec_depth,
                         dec_heads=rc.dec_heads, mask_ratio=rc.mask_ratio, normalize_targets=rc.normalize_targets,
                         drop_path=0.0)


def vlc_config(rc: C.RunConfig, vocab: Vocab) -> vlc.MultimodalConfig:
    return vlc.MultimodalConfig(frame_size=(rc.frame_size, rc.frame_size), patch=rc.patch, max_frames=rc.vlc_frames,
                                vid_dim=rc.vid_dim, vid_depth=rc.vid_depth, heads=rc.vid_heads,
                                global_blocks=rc.global_blocks, text_dim=rc.text_dim, text_depth=rc.text_depth,
                                vocab_size=len(vocab), embed_dim=rc.embed_dim, temperature=rc.temperature,
                                cap_depth=rc.cap_depth, cap_dim=rc.cap_dim, lambda_cap=rc.lambda_cap)


def with_meta(rc: C.RunConfig, ckpt: Checkpoint, keys: Sequence[str]) -> C.RunConfig:
    """Architecture keys come from the checkpoint that owns the weights."""
    found = {k: C.coerce(k, ckpt.meta[f"cfg.{k}"]) for k in keys if f"cfg.{k}" in ckpt.meta}
    return replace(rc, **found)


def meta_for(rc: C.RunConfig, stage: str, step: int, **extra) -> dict[str, object]:
    kept = replace(rc, **{k: "" for k in OUTPUT_KEYS})
    meta: dict[str, object] = {"stage": stage, "config": kept.digest(), "step": step}
    meta.update({f"cfg.{k}": v for k, v in kept.items() if k not in OUTPUT_KEYS})
    meta.update(extra)
    return meta


def need(value: str, what: str) -> str:
    if not value:
        raise UsageError(f"missing required setting: {what}")
    return value


def load_data(path: str) -> DatasetSpec:
    return load_dataset(need(path, "data"))


def load(path: str, what: str) -> Checkpoint:
    p = Path(need(path, what))
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


def save(params, meta, out: str) -> None:
    path = save_checkpoint(params, meta, need(out, "out"))
    print(f"saved {path}")


def print_log(lines: Sequence[str]) -> None:
    for line in lines:
        print(line)


# stages ------------------------------------------------------------------------------

def cmd_gen_data(rc: C.RunConfig) -> None:
    if rc.corpus == "shapes":
        spec = SyntheticWorldSpec(num_classes=rc.num_classes, videos_per_class=rc.videos_per_class,
                                  test_per_class=rc.test_per_class, frame_size=(rc.frame_size, rc.frame_size),
                                  frames_per_video=rc.frames_per_video, seed=rc.seed,
                                  background_level=rc.background_level)
        data = gen_corpus(spec)
    elif rc.corpus == "xor":
        data = gen_xor_corpus(per_cell=rc.videos_per_class, test_per_cell=rc.test_per_class,
                              frame_size=(rc.frame_size, rc.frame_size), num_frames=rc.frames_per_video,
                              seed=rc.seed, background_level=rc.background_level)
    else:
        raise UsageError(f"unknown corpus {rc.corpus!r}")
    root = save_dataset(data, need(rc.out, "out"))
    print(f"wrote {len(data.train)} train and {len(data.test)} test clips to {root}")


def cmd_pretrain_mae(rc: C.RunConfig) -> None:
    data = load_data(rc.data)
    init = None
    if rc.init:
        ck = load(rc.init, "init")
        rc = with_meta(rc, ck, MAE_KEYS)
        init = ck.params
    cfg = mae_config(rc)
    tc = mae.MaeTrainConfig(steps=rc.steps, batch_size=rc.batch_size, lr=rc.lr, warmup_frac=rc.warmup_frac,
                            weight_decay=rc.weight_decay, clip_frames=rc.mae_frames, clip_rate=rc.mae_rate,
                            scales=rc.scale_list, seed=rc.seed)
    res = mae.mae_train(data, cfg, tc, params=init)
    print_log(res.log)
    save(res.params, meta_for(rc, "pretrain-mae", res.steps), rc.out)


def cmd_pretrain_vlc(rc: C.RunConfig) -> None:
    data = load_data(rc.data)
    init = None
    if rc.init:
        ck = load(rc.init, "init")
        rc = with_meta(rc, ck, VLC_KEYS)
        init = ck.params
    vocab = Vocab()
    cfg = vlc_config(rc, vocab)
    tc = vlc.VlcTrainConfig(steps=rc.steps, batch_size=rc.batch_size, image_batch_size=rc.image_batch_size,
                            lr=rc.lr, warmup_steps=int(rc.warmup_frac * rc.steps), weight_decay=rc.weight_decay,
                            video_frames=rc.vlc_frames, video_rate=rc.vlc_rate, seed=rc.seed)
    res = vlc.vlc_train(data, image_view(data), cfg, tc, vocab, params=init)
    print_log(res.log)
    save(res.params, meta_for(rc, "pretrain-vlc", res.steps), rc.out)


def _backbone(rc: C.RunConfig) -> tuple[C.RunConfig, PT.Backbone, dict]:
    keys = MAE_KEYS if rc.backbone == "mae" else VLC_KEYS
    params = None
    if rc.init:
        ck = load(rc.init, "init")
        rc = with_meta(rc, ck, keys)
        params = ck.params
    rng = np.random.default_rng(rc.seed)
    if rc.backbone == "mae":
        cfg = mae_config(rc)
        bb = PT.Backbone("mae", cfg, rc.mae_frames, rc.mae_rate)
        params = params if params is not None else mae.init_params(cfg, rng)
    elif rc.backbone == "vlc":
        cfg = vlc_config(rc, Vocab())
        bb = PT.Backbone("vlc", cfg, rc.vlc_frames, rc.vlc_rate)
        params = params if params is not None else vlc.init_params(cfg, rng)
    else:
        raise UsageError(f"unknown backbone {rc.backbone!r}")
    return rc, bb, params


def _finetune_config(rc: C.RunConfig) -> PT.FinetuneConfig:
    return PT.FinetuneConfig(steps=rc.steps, batch_size=rc.batch_size, base_lr=rc.lr, layer_decay=rc.layer_decay,
                             head_dropout=rc.head_dropout, drop_path=rc.drop_path, weight_decay=rc.weight_decay,
                             warmup_frac=rc.warmup_frac, repeat=rc.repeat, scales=rc.scale_list, loss=rc.loss,
                             seed=rc.seed)


def cmd_posttrain(rc: C.RunConfig) -> None:
    data = load_data(rc.data)
    rc, bb, params = _backbone(rc)
    spec = PT.HeadSpec(data.name, len(data.label_names), rc.multi_label)
    res = PT.finetune(params, bb, data, _finetune_config(rc), spec)
    print_log(res.log)
    acc = PT.top1(PT.predict_logits(res.params, bb, spec, data.train), data.train)
    print(f"metric train_top1 {acc}")
    save(res.params, meta_for(rc, "posttrain", rc.steps, heads=data.name), rc.out)


def cmd_cotrain(rc: C.RunConfig) -> None:
    sets = [load_dataset(p) for p in need(rc.data, "data").split(",")]
    rc, bb, params = _backbone(rc)
    specs = [PT.HeadSpec(d.name, len(d.label_names), rc.multi_label) for d in sets]
    res = PT.cotrain(params, bb, sets, _finetune_config(rc), specs)
    print_log(res.log)
    for name, n in res.head_steps.items():
        print(f"head {name} steps {n}")
    save(res.params, meta_for(rc, "cotrain", rc.steps, heads=",".join(d.name for d in sets)), rc.out)


def cmd_fuse(rc: C.RunConfig) -> None:
    data = load_data(rc.data)
    mck, vck = load(rc.init, "init (masked encoder)"), load(rc.init2, "init2 (multimodal encoder)")
    rc = with_meta(with_meta(rc, mck, MAE_KEYS), vck, VLC_KEYS)
    mcfg, vcfg = mae_config(rc), vlc_config(rc, Vocab())
    fcfg = F.FusionConfig(num_classes=len(data.label_names), heads=min(rc.enc_heads, rc.vid_heads), steps=rc.steps,
                          batch_size=rc.batch_size, lr=rc.lr, weight_decay=rc.weight_decay,
                          warmup_frac=rc.warmup_frac, dropout=rc.fuse_dropout, ema_rate=rc.fuse_ema,
                          mae_frames=rc.mae_frames, mae_rate=rc.mae_rate, mm_frames=rc.fuse_mm_frames,
                          mm_rate=rc.vlc_rate, seed=rc.seed)
    mp = {k: v for k, v in mck.params.items() if k.startswith("mae.")}
    vp = {k: v for k, v in vck.params.items() if k.startswith("vlc.")}
    res = F.interaction_train(mp, vp, data, mcfg, vcfg, fcfg)
    print_log(res.log)
    out = F.predict(res.params, data.train, mcfg, vcfg, fcfg)
    y = np.array([c.labels[0] for c in data.train])
    for name in ("z_fused", "z_mm", "z_mae"):
        print(f"metric train_top1_{name[2:]} {float(np.mean(np.argmax(getattr(out, name).data, 1) == y))}")
    save(res.params, meta_for(rc, "fuse", rc.steps), rc.out)


def cmd_interp_pe(rc: C.RunConfig) -> None:
    ck = load(rc.init, "init")
    params = dict(ck.params)
    new = replace(rc, frame_size=rc.new_frame_size)
    if "mae.pos" in params:
        rc = with_meta(rc, ck, MAE_KEYS)
        frames = rc.new_frames or rc.mae_frames
        params, _ = E.resize_mae_pos(params, mae_config(rc), (rc.new_frame_size,) * 2, frames)
        new = replace(rc, frame_size=rc.new_frame_size, mae_frames=frames)
    if "vlc.vid.pos_s" in params:
        rc = with_meta(rc, ck, VLC_KEYS)
        params = E.resize_vlc_pos(params, rc.frame_size // rc.patch, rc.new_frame_size // rc.patch,
                                  rc.new_frames or None)
        new = replace(new, frame_size=rc.new_frame_size, vlc_frames=rc.new_frames or rc.vlc_frames)
    for k in ("mae.pos", "vlc.vid.pos_s"):
        if k in params:
            print(f"resized {k} to {params[k].shape}")
    save(params, {**ck.meta, **meta_for(new, "interp-pe", int(ck.meta.get("step", 0)))}, rc.out)


def cmd_wise_ft(rc: C.RunConfig) -> None:
    a, b = load(rc.init, "init"), load(rc.init2, "init2")
    params = E.wise_ft(a.params, b.params, rc.alpha)
    save(params, {**a.meta, "stage": "wise-ft", "alpha": rc.alpha}, rc.out)


def cmd_eval(rc: C.RunConfig) -> None:
    data = load_data(rc.data)
    clips = data.train if rc.split == "train" else data.test
    if not clips:
        raise DataError(f"split {rc.split!r} is empty")
    ck = load(rc.init, "init")
    metrics: dict[str, float] = {}
    if rc.task in ("retrieval", "zeroshot"):
        rc = with_meta(rc, ck, VLC_KEYS)
        vocab = Vocab()
        cfg = vlc_config(rc, vocab)
        if rc.task == "retrieval":
            v = vlc.embed_clips(clips, ck.params, cfg, rc.vlc_frames, rc.vlc_rate)
            t = vlc.embed_texts([vocab.encode(c.caption) for c in clips], ck.params, cfg, vocab.pad)
            S = t @ v.T
            if rc.dual_softmax > 0:
                S = E.dual_softmax(S, rc.dual_softmax)
            metrics = E.retrieval_metrics(S)
        else:
            _, acc = E.zero_shot_classify(clips, data.label_names, ck.params, cfg, vocab, rc.template, rc.vlc_frames)
            metrics = {"zeroshot_top1": acc}
    elif rc.task == "classify":
        rc = replace(rc, **{k: C.coerce(k, ck.meta[f"cfg.{k}"]) for k in HEAD_KEYS if f"cfg.{k}" in ck.meta})
        rc, bb, params = _backbone(rc)
        spec = PT.HeadSpec(data.name, len(data.label_names))
        if spec.names[0] not in params:
            raise DataError(f"checkpoint has no head for dataset {data.name!r}")
        metrics = {"top1": PT.top1(PT.predict_logits(params, bb, spec, clips), clips)}
    else:
        raise UsageError(f"unknown task {rc.task!r}")
    for k, val in metrics.items():
        print(f"metric {k} {val}")
    if rc.report:
        Path(rc.report).write_text("".join(f"{k}={val}\n" for k, val in sorted(metrics.items())))


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain-mae": cmd_pretrain_mae, "pretrain-vlc": cmd_pretrain_vlc,
    "posttrain": cmd_posttrain, "cotrain": cmd_cotrain, "fuse": cmd_fuse, "interp-pe": cmd_interp_pe,
    "wise-ft": cmd_wise_ft, "eval": cmd_eval,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(list(sys.argv[1:] if argv is None else argv)))
        stage, path = ns.pop("stage"), ns.pop("config")
        rc = C.resolve(path, ns)
        print("# resolved config")
        sys.stdout.write(rc.render())
        sys.stdout.flush()
        COMMANDS[stage](rc)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as exc:
        # ConfigError and invalid stage settings (bad shapes, mismatched stores) land here
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
