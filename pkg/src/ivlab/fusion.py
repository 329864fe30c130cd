"""Cross-model interaction between a frozen masked encoder and a frozen multimodal encoder.

CMA blocks (gated cross-attention + gated FFN) let masked-encoder tokens
attend to multimodal tokens at matched stages; a final reversed block lets the
multimodal class token attend to the final masked-encoder tokens. All gates
and the score-fusion scalar start at zero, so before training the pipeline
reproduces the frozen multimodal classifier exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from . import mae, vlc
from . import tensor as T
from .data import DatasetSpec, VideoClip, sample_clip
from .optim import OptimState, optimizer_step, warmup_cosine, warmup_steps_for
from .posttrain import ce_loss
from .tensor import Tensor

FUSE = "fuse"


@dataclass
class FusionConfig:
    num_classes: int = 2
    stage_map: tuple[tuple[int, int], ...] | None = None  # (masked-encoder layer, multimodal layer), 1-based
    heads: int = 4
    steps: int = 200
    batch_size: int = 64
    lr: float = 5e5  # as printed in the source recipe; almost certainly 5e-5, override in practice
    weight_decay: float = 0.001
    warmup_frac: float = 0.2  # 1 warmup epoch out of 5
    dropout: float = 0.0  # recipe value 0.9
    ema_rate: float = 0.0  # recipe value 0.9999
    mae_frames: int = 8
    mae_rate: int = 2
    mm_frames: int = 8
    mm_rate: int = 2
    seed: int = 0


def default_stage_map(mcfg: mae.MaeConfig, vcfg: vlc.MultimodalConfig) -> tuple[tuple[int, int], ...]:
    """Middle and last masked-encoder layers paired with the first and last global stages."""
    pairs = [(max(1, mcfg.enc_depth // 2), vcfg.vid_depth - vcfg.global_blocks + 1),
             (mcfg.enc_depth, vcfg.vid_depth)]
    return tuple(dict.fromkeys(pairs))


def resolve_stage_map(cfg: FusionConfig, mcfg: mae.MaeConfig, vcfg: vlc.MultimodalConfig):
    stages = cfg.stage_map if cfg.stage_map is not None else default_stage_map(mcfg, vcfg)
    for m, v in stages:
        if not 1 <= m <= mcfg.enc_depth:
            raise ValueError(f"masked-encoder layer {m} has no exposed tokens")
        if not 1 <= v <= vcfg.vid_depth:
            raise ValueError(f"multimodal layer {v} has no exposed tokens")
    if len({m for m, _ in stages}) != len(stages):
        raise ValueError("each masked-encoder layer hosts at most one CMA block")
    return tuple(sorted(stages))


# CMA block -----------------------------------------------------------------------

def init_cma(store: dict, name: str, dim: int, kv_dim: int, rng: np.random.Generator) -> None:
    L.init_norm(store, f"{name}.ln1", dim)
    L.init_attention(store, f"{name}.xattn", dim, rng, kv_dim=kv_dim)
    L.init_norm(store, f"{name}.ln2", dim)
    L.init_mlp(store, f"{name}.mlp", dim, rng)
    store[f"{name}.gate_mhca"] = np.array(0.0)
    store[f"{name}.gate_ffn"] = np.array(0.0)


def cma_apply(q: Tensor, kv: Tensor, P, name: str, heads: int) -> Tensor:
    """``q + tanh(g1) MHCA(LN(q), kv)``, then ``+ tanh(g2) FFN(LN(.))``."""
    q, kv = T.as_tensor(q), T.as_tensor(kv)
    if kv.shape[-1] != P[f"{name}.xattn.k.w"].shape[0]:
        raise ValueError(f"key/value width {kv.shape[-1]} does not match block {name}")
    if q.shape[-1] != P[f"{name}.xattn.q.w"].shape[0]:
        raise ValueError(f"query width {q.shape[-1]} does not match block {name}")
    out = q + T.tanh(P[f"{name}.gate_mhca"]) * L.mha(L.norm(q, P, f"{name}.ln1"), kv, P, f"{name}.xattn", heads)
    return out + T.tanh(P[f"{name}.gate_ffn"]) * L.mlp(L.norm(out, P, f"{name}.ln2"), P, f"{name}.mlp")


def dynamic_fuse(z_mm, z_mae, lam) -> Tensor:
    z_mm, z_mae = T.as_tensor(z_mm), T.as_tensor(z_mae)
    if z_mm.shape != z_mae.shape:
        raise ValueError(f"logit shapes differ: {z_mm.shape} vs {z_mae.shape}")
    return z_mm + T.tanh(T.as_tensor(lam)) * z_mae


# parameters ----------------------------------------------------------------------

def init_params(mcfg: mae.MaeConfig, vcfg: vlc.MultimodalConfig, cfg: FusionConfig,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    P: dict[str, np.ndarray] = {}
    for m, _ in resolve_stage_map(cfg, mcfg, vcfg):
        init_cma(P, f"{FUSE}.cma.{m}", mcfg.enc_dim, vcfg.vid_dim, rng)
    init_cma(P, f"{FUSE}.cma.rev", vcfg.vid_dim, mcfg.enc_dim, rng)
    L.init_linear(P, f"{FUSE}.head.mm", vcfg.vid_dim, cfg.num_classes, rng)
    L.init_linear(P, f"{FUSE}.head.mae", mcfg.enc_dim, cfg.num_classes, rng)
    P[f"{FUSE}.lambda"] = np.array(0.0)
    return P


def trainable_names(store) -> list[str]:
    return sorted(k for k in store if k.startswith(f"{FUSE}.") or k == "vlc.vid.query")


def frozen_hash(store) -> str:
    """SHA-256 over names and bytes of every non-trainable parameter."""
    keep = set(trainable_names(store))
    h = hashlib.sha256()
    for k in sorted(store):
        if k not in keep:
            h.update(k.encode())
            h.update(np.ascontiguousarray(store[k]).tobytes())
    return h.hexdigest()


# forward ----------------------------------------------------------------------------

@dataclass
class FusedOutput:
    z_fused: Tensor
    z_mm: Tensor
    z_mae: Tensor


def clip_inputs(clips: Sequence[VideoClip], cfg: FusionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-branch frame stacks (the multimodal branch may use sparser sampling)."""
    xm = np.stack([sample_clip(c, cfg.mae_frames, cfg.mae_rate, start=0).frames for c in clips])
    xv = np.stack([sample_clip(c, cfg.mm_frames, cfg.mm_rate, start=0).frames for c in clips])
    return xm, xv


def mm_logits(x_mm: np.ndarray, P, vcfg: vlc.MultimodalConfig) -> Tensor:
    """The multimodal branch alone: head over its normed class token."""
    cls = vlc.encode_video(x_mm, P, vcfg).class_token
    return L.linear(L.norm(cls, P, "vlc.vid.norm"), P, f"{FUSE}.head.mm")


def fused_forward(x_mae: np.ndarray, x_mm: np.ndarray, P, mcfg: mae.MaeConfig, vcfg: vlc.MultimodalConfig,
                  cfg: FusionConfig, rng: np.random.Generator | None = None) -> FusedOutput:
    stages = dict(resolve_stage_map(cfg, mcfg, vcfg))
    enc = vlc.encode_video(x_mm, P, vcfg)
    x = mae.embed(x_mae, P, mcfg)
    for i in range(mcfg.enc_depth):
        x = mae.encoder_block(x, P, mcfg, i)
        if i + 1 in stages:
            x = cma_apply(x, enc.tokens[stages[i + 1]], P, f"{FUSE}.cma.{i + 1}", cfg.heads)
    x = L.norm(x, P, "mae.enc.norm")

    B = x_mae.shape[0]
    cls = cma_apply(enc.class_token.reshape(B, 1, vcfg.vid_dim), x, P, f"{FUSE}.cma.rev", cfg.heads)
    feat_mm = L.dropout(L.norm(cls.reshape(B, vcfg.vid_dim), P, "vlc.vid.norm"), cfg.dropout, rng)
    feat_mae = L.dropout(x.mean(axis=1), cfg.dropout, rng)
    z_mm = L.linear(feat_mm, P, f"{FUSE}.head.mm")
    z_mae = L.linear(feat_mae, P, f"{FUSE}.head.mae")
    return FusedOutput(dynamic_fuse(z_mm, z_mae, P[f"{FUSE}.lambda"]), z_mm, z_mae)


# training -----------------------------------------------------------------------------

@dataclass
class FusionResult:
    params: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    grad_keys: set[str] = field(default_factory=set)  # names that ever received a nonzero gradient
    ema: dict[str, np.ndarray] | None = None


def interaction_train(mae_params: dict, vlc_params: dict, data: DatasetSpec, mcfg: mae.MaeConfig,
                      vcfg: vlc.MultimodalConfig, cfg: FusionConfig,
                      fusion_params: dict | None = None) -> FusionResult:
    """Train only CMA blocks, both heads, the multimodal query tokens and the fusion scalar."""
    if not data.train:
        raise ValueError("dataset is empty")
    if set(mae_params) & set(vlc_params):
        raise ValueError("parameter stores overlap")
    rng = np.random.default_rng(cfg.seed)
    P = {k: v.copy() for k, v in {**mae_params, **vlc_params}.items()}
    P.update(fusion_params if fusion_params is not None else init_params(mcfg, vcfg, cfg, rng))
    trainable = trainable_names(P)
    state = OptimState(base_lr=cfg.lr, weight_decay=cfg.weight_decay)
    warm = warmup_steps_for(cfg.steps, cfg.warmup_frac)
    ema = {k: P[k].copy() for k in trainable} if cfg.ema_rate > 0 else None
    out = FusionResult(P, ema=ema)
    n = len(data.train)
    for step in range(cfg.steps):
        idx = np.arange(n) if cfg.batch_size >= n else np.sort(rng.choice(n, size=cfg.batch_size, replace=False))
        clips = [data.train[i] for i in idx]
        xm, xv = clip_inputs(clips, cfg)
        Pt = T.param_tensors(P, trainable)
        res = fused_forward(xm, xv, Pt, mcfg, vcfg, cfg, rng)
        loss = ce_loss(res.z_fused, [c.labels[0] for c in clips])
        grads = T.backward(loss, {k: Pt[k] for k in trainable})
        out.grad_keys |= {k for k, g in grads.items() if np.any(g != 0)}
        optimizer_step(P, grads, state, lr=warmup_cosine(step, cfg.steps, warm, cfg.lr))
        if ema is not None:
            for k in trainable:
                ema[k] = cfg.ema_rate * ema[k] + (1 - cfg.ema_rate) * P[k]
        out.losses.append(loss.item())
        out.log.append(f"step {step} loss {loss.item():.6f}")
    return out


def predict(P: dict, clips: Sequence[VideoClip], mcfg: mae.MaeConfig, vcfg: vlc.MultimodalConfig,
            cfg: FusionConfig, batch: int = 32) -> FusedOutput:
    Pt = T.param_tensors(P, ())
    parts = []
    for s in range(0, len(clips), batch):
        xm, xv = clip_inputs(clips[s:s + batch], cfg)
        parts.append(fused_forward(xm, xv, Pt, mcfg, vcfg, cfg))
    cat = lambda f: Tensor(np.concatenate([getattr(p, f).data for p in parts]))  # noqa: E731
    return FusedOutput(cat("z_fused"), cat("z_mm"), cat("z_mae"))


# single-branch baselines -------------------------------------------------------------

def branch_features(P: dict, clips: Sequence[VideoClip], branch: str, mcfg: mae.MaeConfig,
                    vcfg: vlc.MultimodalConfig, cfg: FusionConfig) -> np.ndarray:
    """Frozen features of one branch: pooled masked-encoder tokens or the multimodal class token."""
    Pt = T.param_tensors(P, ())
    xm, xv = clip_inputs(clips, cfg)
    if branch == "mae":
        return mae.encode(xm, Pt, mcfg).mean(axis=1).data
    if branch == "mm":
        return L.norm(vlc.encode_video(xv, Pt, vcfg).class_token, Pt, "vlc.vid.norm").data
    raise ValueError(f"unknown branch {branch!r}")


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, steps: int = 300, lr: float = 1e-2,
                 weight_decay: float = 0.0, seed: int = 0) -> dict[str, np.ndarray]:
    """Softmax regression on fixed features with AdamW (full batch)."""
    K = int(train_y.max()) + 1
    P: dict[str, np.ndarray] = {}
    L.init_linear(P, "probe", train_x.shape[1], max(K, 2), np.random.default_rng(seed), zero=True)
    state = OptimState(base_lr=lr, weight_decay=weight_decay)
    x = Tensor(train_x)
    for _ in range(steps):
        Pt = T.param_tensors(P)
        loss = ce_loss(L.linear(x, Pt, "probe"), train_y)
        optimizer_step(P, T.backward(loss, Pt), state)
    return P


def probe_accuracy(P: dict, x: np.ndarray, y: np.ndarray) -> float:
    logits = x @ P["probe.w"] + P["probe.b"]
    return float(np.mean(np.argmax(logits, axis=1) == y))
