"""Video-language contrastive learning with a caption decoder (align, then fuse).

The video encoder is a reduced UniFormerV2-style stack: per-frame spatial
attention blocks form the local stages, and in each of the last
``global_blocks`` layers a small set of learnable query tokens cross-attends
over every spatiotemporal token of that layer. The per-stage query summaries
are mixed by learnable weights into the class token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .data import DatasetSpec, Vocab, sample_clip
from .optim import OptimState, optimizer_step, warmup_cosine, warmup_steps_for
from .tensor import Tensor

MIN_TEMPERATURE = 1e-3


@dataclass
class MultimodalConfig:
    frame_size: tuple[int, int] = (16, 16)
    channels: int = 3
    patch: int = 4
    max_frames: int = 16
    vid_dim: int = 32
    vid_depth: int = 4
    heads: int = 4
    global_blocks: int = 4
    num_query_tokens: int = 1
    text_dim: int = 32
    text_depth: int = 2
    vocab_size: int = 0
    max_text_len: int = 8
    embed_dim: int = 32
    temperature: float = 0.07
    cap_depth: int = 6
    cap_dim: int = 32
    lambda_cap: float = 1.0

    def __post_init__(self):
        if self.global_blocks > self.vid_depth or self.global_blocks < 1:
            raise ValueError("global_blocks must lie in [1, vid_depth]")
        if self.frame_size[0] % self.patch or self.frame_size[1] % self.patch:
            raise ValueError("frame size must be divisible by patch")
        for d in (self.vid_dim, self.text_dim, self.cap_dim):
            if d % self.heads:
                raise ValueError("widths must be divisible by heads")

    @property
    def spatial_tokens(self) -> int:
        return (self.frame_size[0] // self.patch) * (self.frame_size[1] // self.patch)

    @property
    def global_layers(self) -> list[int]:
        """1-based layer numbers hosting a global stage."""
        return list(range(self.vid_depth - self.global_blocks + 1, self.vid_depth + 1))


@dataclass
class VlcTrainConfig:
    steps: int = 500
    batch_size: int = 16
    image_batch_size: int = 16
    lr: float = 8e-5
    warmup_steps: int = 50
    weight_decay: float = 0.2
    video_frames: int = 16
    video_rate: int = 1
    seed: int = 0


@dataclass
class VideoEncoding:
    embedding: Tensor  # [B, embed_dim], unit rows
    class_token: Tensor  # [B, vid_dim]
    tokens: dict[int, Tensor]  # layer number -> [B, T*S, vid_dim]

    @property
    def final_tokens(self) -> Tensor:
        return self.tokens[max(self.tokens)]


def init_params(cfg: MultimodalConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if cfg.vocab_size < 3:
        raise ValueError("vocab_size must be set")
    P: dict[str, np.ndarray] = {}
    D = cfg.vid_dim
    L.init_linear(P, "vlc.vid.patch", cfg.patch * cfg.patch * cfg.channels, D, rng)
    P["vlc.vid.pos_s"] = rng.normal(0.0, 0.02, size=(cfg.spatial_tokens, D))
    P["vlc.vid.pos_t"] = rng.normal(0.0, 0.02, size=(cfg.max_frames, D))
    for i in range(cfg.vid_depth):
        L.init_block(P, f"vlc.vid.blocks.{i}", D, rng)
    P["vlc.vid.query"] = rng.normal(0.0, 0.02, size=(cfg.num_query_tokens, D))
    for g in range(cfg.global_blocks):
        L.init_cross_block(P, f"vlc.vid.global.{g}", D, D, rng)
    w = np.zeros(cfg.global_blocks)
    w[-1] = 1.0
    P["vlc.vid.stage_w"] = w
    L.init_norm(P, "vlc.vid.norm", D)
    L.init_linear(P, "vlc.vid.proj", D, cfg.embed_dim, rng, bias=False)

    E = cfg.text_dim
    P["vlc.txt.tok"] = rng.normal(0.0, 0.02, size=(cfg.vocab_size, E))
    P["vlc.txt.pos"] = rng.normal(0.0, 0.02, size=(cfg.max_text_len, E))
    for i in range(cfg.text_depth):
        L.init_block(P, f"vlc.txt.blocks.{i}", E, rng)
    L.init_norm(P, "vlc.txt.norm", E)
    L.init_linear(P, "vlc.txt.proj", E, cfg.embed_dim, rng, bias=False)
    P["vlc.log_temp"] = np.array(math.log(cfg.temperature))

    C = cfg.cap_dim
    P["vlc.cap.tok"] = rng.normal(0.0, 0.02, size=(cfg.vocab_size, C))
    P["vlc.cap.pos"] = rng.normal(0.0, 0.02, size=(cfg.max_text_len, C))
    for i in range(cfg.cap_depth):
        L.init_decoder_block(P, f"vlc.cap.blocks.{i}", C, D, rng)
    L.init_norm(P, "vlc.cap.norm", C)
    L.init_linear(P, "vlc.cap.mlp.fc1", C, C, rng)
    L.init_linear(P, "vlc.cap.mlp.fc2", C, cfg.vocab_size, rng)
    return P


def depth_index(name: str, cfg: MultimodalConfig) -> int:
    if name.startswith(("vlc.vid.patch", "vlc.vid.pos")):
        return 0
    i = L.block_depth(name, "vlc.vid.blocks")
    if i is not None:
        return i + 1
    g = L.block_depth(name, "vlc.vid.global")
    if g is not None:
        return cfg.global_layers[g]
    return cfg.vid_depth + 1


# encoders ---------------------------------------------------------------------

def encode_video(frames, P, cfg: MultimodalConfig, rng=None) -> VideoEncoding:
    """Encode a batch ``[B, T, H, W, C]``; ``T == 1`` is the image pathway."""
    frames = T.as_tensor(frames)
    B, Tn, H, W, C = frames.shape
    if (H, W) != tuple(cfg.frame_size) or C != cfg.channels:
        raise ValueError(f"clip {frames.shape[1:]} does not match config")
    if Tn < 1 or Tn > cfg.max_frames:
        raise ValueError(f"frame count {Tn} outside [1, {cfg.max_frames}]")
    p, S, D = cfg.patch, cfg.spatial_tokens, cfg.vid_dim
    x = frames.reshape(B, Tn, H // p, p, W // p, p, C)
    x = T.transpose(x, (0, 1, 2, 4, 3, 5, 6)).reshape(B, Tn, S, p * p * C)
    x = L.linear(x, P, "vlc.vid.patch") + P["vlc.vid.pos_s"]
    x = x + P["vlc.vid.pos_t"][:Tn].reshape(1, Tn, 1, D)

    q = T.broadcast_to(P["vlc.vid.query"], (B, cfg.num_query_tokens, D))
    first_global = cfg.vid_depth - cfg.global_blocks
    tokens: dict[int, Tensor] = {}
    stages = []
    for i in range(cfg.vid_depth):
        x = L.block(x.reshape(B * Tn, S, D), P, f"vlc.vid.blocks.{i}", cfg.heads).reshape(B, Tn, S, D)
        flat = x.reshape(B, Tn * S, D)
        tokens[i + 1] = flat
        if i >= first_global:
            q = L.cross_block(q, flat, P, f"vlc.vid.global.{i - first_global}", cfg.heads)
            stages.append(q.mean(axis=1))
    stacked = T.stack(stages, axis=1)  # [B, G, D]
    cls = (stacked * P["vlc.vid.stage_w"].reshape(1, -1, 1)).sum(axis=1)
    emb = project_class_token(cls, P)
    return VideoEncoding(emb, cls, tokens)


def project_class_token(cls: Tensor, P) -> Tensor:
    return L.l2_normalize(L.linear(L.norm(cls, P, "vlc.vid.norm"), P, "vlc.vid.proj"))


def pad_tokens(seqs: Sequence[Sequence[int]], pad: int, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ValueError("empty token sequence")
    n = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, np.array([len(s) for s in seqs])


def _check_ids(ids: np.ndarray, cfg: MultimodalConfig) -> None:
    if ids.shape[1] > cfg.max_text_len:
        raise ValueError(f"sequence longer than max_text_len={cfg.max_text_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")


def encode_text(seqs: Sequence[Sequence[int]], P, cfg: MultimodalConfig, pad: int = 0) -> Tensor:
    """Causal text transformer; the last real position's state is the sentence feature."""
    ids, lengths = pad_tokens(seqs, pad)
    _check_ids(ids, cfg)
    n = ids.shape[1]
    x = P["vlc.txt.tok"][ids] + P["vlc.txt.pos"][:n]
    for i in range(cfg.text_depth):
        x = L.block(x, P, f"vlc.txt.blocks.{i}", cfg.heads, causal=True)
    last = T.gather(x, (lengths - 1).reshape(-1, 1, 1), axis=1).reshape(len(seqs), cfg.text_dim)
    return L.l2_normalize(L.linear(L.norm(last, P, "vlc.txt.norm"), P, "vlc.txt.proj"))


# losses -------------------------------------------------------------------------

def temperature(P) -> Tensor:
    return T.exp(P["vlc.log_temp"])


def contrastive_loss(video_emb: Tensor, text_emb: Tensor, log_temp) -> Tensor:
    """Symmetric InfoNCE over in-batch pairs ``i <-> i``."""
    video_emb, text_emb = T.as_tensor(video_emb), T.as_tensor(text_emb)
    n = video_emb.shape[0]
    if n < 1 or text_emb.shape[0] != n:
        raise ValueError("need matching, non-empty embedding batches")
    logits = (video_emb @ text_emb.T) / T.exp(T.as_tensor(log_temp))
    diag = (np.arange(n), np.arange(n))
    v2t = -T.log_softmax(logits, axis=1)[diag].mean()
    t2v = -T.log_softmax(logits, axis=0)[diag].mean()
    return (v2t + t2v) * 0.5


def caption_forward(video_tokens: Tensor, ids: np.ndarray, P, cfg: MultimodalConfig) -> Tensor:
    """Decoder states ``[B, n, cap_dim]`` for input ids ``[B, n]`` attending to video tokens."""
    _check_ids(ids, cfg)
    n = ids.shape[1]
    x = P["vlc.cap.tok"][ids] + P["vlc.cap.pos"][:n]
    for i in range(cfg.cap_depth):
        x = L.decoder_block(x, video_tokens, P, f"vlc.cap.blocks.{i}", cfg.heads)
    return L.norm(x, P, "vlc.cap.norm")


def caption_logits(states: Tensor, P) -> Tensor:
    return L.mlp(states, P, "vlc.cap.mlp")


def caption_loss(video_tokens: Tensor, seqs: Sequence[Sequence[int]], P, cfg: MultimodalConfig,
                 pad: int = 0) -> tuple[Tensor, Tensor]:
    """Teacher-forced next-token cross-entropy, plus the fused feature per caption.

    The fused feature is the decoder state at the last input position.
    """
    if any(len(s) < 2 for s in seqs):
        raise ValueError("caption needs at least two tokens")
    ids, lengths = pad_tokens(seqs, pad)
    inp, tgt = ids[:, :-1], ids[:, 1:]
    states = caption_forward(video_tokens, inp, P, cfg)
    logp = T.log_softmax(caption_logits(states, P), axis=-1)
    B, n = tgt.shape
    valid = np.arange(n)[None, :] < (lengths - 1)[:, None]
    picked = T.gather(logp, tgt[..., None], axis=2).reshape(B, n)
    loss = -(picked * valid).sum() / valid.sum()
    fused = T.gather(states, (lengths - 2).reshape(-1, 1, 1), axis=1).reshape(B, cfg.cap_dim)
    return loss, fused


def greedy_decode(video_tokens: Tensor, P, cfg: MultimodalConfig, vocab: Vocab) -> list[list[int]]:
    B = video_tokens.shape[0]
    seqs = [[vocab.bos] for _ in range(B)]
    done = [False] * B
    for _ in range(cfg.max_text_len - 1):
        ids = np.array(seqs)
        logits = caption_logits(caption_forward(video_tokens, ids, P, cfg), P)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1)
        for b in range(B):
            seqs[b].append(int(nxt[b]) if not done[b] else vocab.pad)
            done[b] = done[b] or nxt[b] == vocab.eos
        if all(done):
            break
    return seqs


# training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    modalities: list[str] = field(default_factory=list)
    steps: int = 0


def step_modality(step: int) -> str:
    return "video" if step % 2 == 0 else "image"


def batch_frames(clips, frames: int, rate: int) -> np.ndarray:
    return np.stack([sample_clip(c, frames, rate, start=0).frames for c in clips])


def vlc_loss(frames: np.ndarray, captions: Sequence[Sequence[int]], P, cfg: MultimodalConfig,
             pad: int = 0) -> tuple[Tensor, dict[str, float]]:
    enc = encode_video(frames, P, cfg)
    txt = encode_text(captions, P, cfg, pad)
    loss = contrastive_loss(enc.embedding, txt, P["vlc.log_temp"])
    parts = {"contrastive": loss.item()}
    if cfg.lambda_cap:
        cap, _ = caption_loss(enc.final_tokens, captions, P, cfg, pad)
        parts["caption"] = cap.item()
        loss = loss + cap * cfg.lambda_cap
    return loss, parts


def vlc_train(video_data: DatasetSpec, image_data: DatasetSpec, cfg: MultimodalConfig, tc: VlcTrainConfig,
              vocab: Vocab, params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Alternate video (even steps) and image (odd steps) batches."""
    if not video_data.train or not image_data.train:
        raise ValueError("both datasets must be non-empty")
    rng = np.random.default_rng(tc.seed)
    P = init_params(cfg, rng) if params is None else {k: v.copy() for k, v in params.items()}
    state = OptimState(base_lr=tc.lr, weight_decay=tc.weight_decay)
    trainable = [k for k in P if cfg.lambda_cap or not k.startswith("vlc.cap.")]
    out = TrainResult(P)
    floor = math.log(MIN_TEMPERATURE)
    for step in range(tc.steps):
        modality = step_modality(step)
        if modality == "video":
            pool, bs, frames, rate = video_data.train, tc.batch_size, tc.video_frames, tc.video_rate
        else:
            pool, bs, frames, rate = image_data.train, tc.image_batch_size, 1, 1
        idx = np.arange(len(pool)) if bs >= len(pool) else np.sort(rng.choice(len(pool), size=bs, replace=False))
        clips = [pool[i] for i in idx]
        x = batch_frames(clips, frames, rate)
        caps = [vocab.encode(c.caption) for c in clips]
        Pt = T.param_tensors(P, trainable)
        loss, _ = vlc_loss(x, caps, Pt, cfg, vocab.pad)
        grads = T.backward(loss, {k: Pt[k] for k in trainable})
        optimizer_step(P, grads, state, lr=warmup_cosine(step, tc.steps, tc.warmup_steps, tc.lr))
        P["vlc.log_temp"] = np.maximum(P["vlc.log_temp"], floor)
        out.losses.append(loss.item())
        out.modalities.append(modality)
        out.log.append(f"step {step} loss {loss.item():.6f} modality {modality}")
    out.steps = tc.steps
    return out


def embed_clips(clips, P, cfg: MultimodalConfig, frames: int, rate: int = 1, batch: int = 32) -> np.ndarray:
    Pt = T.param_tensors(P, ())
    out = []
    for s in range(0, len(clips), batch):
        x = batch_frames(clips[s:s + batch], frames, rate)
        out.append(encode_video(x, Pt, cfg).embedding.data)
    return np.concatenate(out)


def embed_texts(seqs, P, cfg: MultimodalConfig, pad: int = 0) -> np.ndarray:
    return encode_text(seqs, T.param_tensors(P, ()), cfg, pad).data
