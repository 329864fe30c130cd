"""Masked video modeling: cube tokens, tube masks, asymmetric encoder-decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .data import DatasetSpec, multi_scale_crop, sample_clip
from .optim import OptimState, optimizer_step, warmup_cosine, warmup_steps_for
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    tube: tuple[int, int, int]
    grid: tuple[int, int, int]
    channels: int

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1] * self.grid[2]

    @property
    def num_spatial(self) -> int:
        return self.grid[1] * self.grid[2]

    @property
    def token_dim(self) -> int:
        t, p, q = self.tube
        return t * p * q * self.channels


@dataclass(frozen=True)
class MaskPattern:
    spatial_mask: np.ndarray  # bool [H'*W'], True = masked
    ratio: float
    temporal: int

    @property
    def full(self) -> np.ndarray:
        """Token-level mask in τ-major order, ``[T'*H'*W']``."""
        return np.tile(self.spatial_mask, self.temporal)

    @property
    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(self.full)

    @property
    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(~self.full)


@dataclass
class MaeConfig:
    num_frames: int = 8
    frame_size: tuple[int, int] = (16, 16)
    channels: int = 3
    tube: tuple[int, int, int] = (2, 4, 4)
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int | None = None
    dec_depth: int = 4
    dec_heads: int = 4
    mask_ratio: float = 0.9
    normalize_targets: bool = True
    zero_init_head: bool = False
    drop_path: float = 0.0

    def __post_init__(self):
        if self.dec_dim is None:
            self.dec_dim = self.enc_dim // 2
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("model widths must be divisible by their head counts")

    @property
    def patch_grid(self) -> PatchGrid:
        return make_grid((self.num_frames, *self.frame_size, self.channels), self.tube)


@dataclass
class MaeTrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 2.5e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.05
    clip_frames: int = 8
    clip_rate: int = 2
    scales: tuple[float, ...] = (1.0, 0.875, 0.75, 0.66)
    random_start: bool = True
    seed: int = 0


# tokenization ------------------------------------------------------------------

def make_grid(shape: tuple[int, int, int, int], tube: tuple[int, int, int]) -> PatchGrid:
    Tn, H, W, C = shape
    t, p, q = tube
    if Tn % t or H % p or W % q:
        raise ValueError(f"clip {shape[:3]} not divisible by tube {tube}")
    return PatchGrid(tuple(tube), (Tn // t, H // p, W // q), C)


def _perm(x, axes):
    return T.transpose(x, axes) if isinstance(x, Tensor) else np.transpose(x, axes)


def patchify(frames, tube: tuple[int, int, int]):
    """``[..., T, H, W, C]`` -> (``[..., T'H'W', t*p*p*C]``, grid).

    Works on arrays and on tensors (differentiably).
    """
    lead = frames.shape[:-4]
    grid = make_grid(frames.shape[-4:], tube)
    (t, p, q), (gt, gh, gw), C = grid.tube, grid.grid, grid.channels
    k = len(lead)
    x = frames.reshape(*lead, gt, t, gh, p, gw, q, C)
    axes = tuple(range(k)) + tuple(k + a for a in (0, 2, 4, 1, 3, 5, 6))
    x = _perm(x, axes)
    return x.reshape(*lead, grid.num_tokens, grid.token_dim), grid


def unpatchify(tokens, grid: PatchGrid):
    lead = tokens.shape[:-2]
    (t, p, q), (gt, gh, gw), C = grid.tube, grid.grid, grid.channels
    k = len(lead)
    x = tokens.reshape(*lead, gt, gh, gw, t, p, q, C)
    axes = tuple(range(k)) + tuple(k + a for a in (0, 3, 1, 4, 2, 5, 6))
    x = _perm(x, axes)
    return x.reshape(*lead, gt * t, gh * p, gw * q, C)


def mask_count(num_spatial: int, ratio: float) -> int:
    return math.ceil(ratio * num_spatial)


def tube_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> MaskPattern:
    """Mask ``ceil(ratio * H'W')`` spatial positions, shared by every temporal index."""
    if not 0 < ratio < 1:
        raise ValueError("mask ratio must lie in (0, 1)")
    n = grid.num_spatial
    k = mask_count(n, ratio)
    if k >= n:
        raise ValueError(f"ratio {ratio} masks all {n} spatial positions")
    spatial = np.zeros(n, dtype=bool)
    spatial[rng.choice(n, size=k, replace=False)] = True
    return MaskPattern(spatial, ratio, grid.grid[0])


# model -----------------------------------------------------------------------

def init_params(cfg: MaeConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    grid = cfg.patch_grid
    P: dict[str, np.ndarray] = {}
    L.init_linear(P, "mae.patch", grid.token_dim, cfg.enc_dim, rng)
    P["mae.pos"] = rng.normal(0.0, 0.02, size=(grid.num_tokens, cfg.enc_dim))
    for i in range(cfg.enc_depth):
        L.init_block(P, f"mae.enc.blocks.{i}", cfg.enc_dim, rng)
    L.init_norm(P, "mae.enc.norm", cfg.enc_dim)
    L.init_linear(P, "mae.dec.proj", cfg.enc_dim, cfg.dec_dim, rng)
    P["mae.dec.mask_token"] = rng.normal(0.0, 0.02, size=(cfg.dec_dim,))
    P["mae.dec.pos"] = rng.normal(0.0, 0.02, size=(grid.num_tokens, cfg.dec_dim))
    for i in range(cfg.dec_depth):
        L.init_block(P, f"mae.dec.blocks.{i}", cfg.dec_dim, rng)
    L.init_norm(P, "mae.dec.norm", cfg.dec_dim)
    L.init_linear(P, "mae.dec.head", cfg.dec_dim, grid.token_dim, rng, zero=cfg.zero_init_head)
    return P


def depth_index(name: str, cfg: MaeConfig) -> int:
    """Patch/position embeddings are depth 0, encoder block i is i+1, everything after is the top."""
    if name in ("mae.patch.w", "mae.patch.b", "mae.pos"):
        return 0
    i = L.block_depth(name, "mae.enc.blocks")
    if i is not None:
        return i + 1
    return cfg.enc_depth + 1


def prepare_input(frames, cfg: MaeConfig):
    """Match clip channels to the model; a 1-channel model sees the channel mean."""
    C = frames.shape[-1]
    if C == cfg.channels:
        return frames
    if cfg.channels == 1:
        return frames.mean(axis=-1, keepdims=True)
    raise ValueError(f"clip has {C} channels, model expects {cfg.channels}")


def embed(frames, P, cfg: MaeConfig) -> Tensor:
    tokens, _ = patchify(prepare_input(frames, cfg), cfg.tube)
    return L.linear(T.as_tensor(tokens), P, "mae.patch") + P["mae.pos"]


def encoder_block(x: Tensor, P, cfg: MaeConfig, i: int, rng=None) -> Tensor:
    return L.block(x, P, f"mae.enc.blocks.{i}", cfg.enc_heads,
                   drop_path_rate=cfg.drop_path, rng=rng)


def encode(frames, P, cfg: MaeConfig, rng=None) -> Tensor:
    """Full (unmasked) encoder pass used after pretraining: ``[B, N, enc_dim]``."""
    x = embed(frames, P, cfg)
    for i in range(cfg.enc_depth):
        x = encoder_block(x, P, cfg, i, rng)
    return L.norm(x, P, "mae.enc.norm")


def _rows(x: Tensor, index: np.ndarray) -> Tensor:
    return T.gather(x, index[..., None], axis=1)


def normalize_cubes(target, eps: float = 1e-6):
    mu = target.mean(axis=-1, keepdims=True)
    xc = target - mu
    var = (xc * xc).mean(axis=-1, keepdims=True) + 1e-12  # keeps d(std) finite on flat cubes
    std = T.sqrt(var) if isinstance(var, Tensor) else np.sqrt(var)
    return xc / (std + eps)


def mae_forward(frames, masks: list[MaskPattern], P, cfg: MaeConfig, rng=None, target=None,
                trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Reconstruct masked cubes of a batch ``[B, T, H, W, C]``.

    Returns the prediction ``[B, M, token_dim]`` and the masked-only MSE. The
    reconstruction target is taken from ``target`` (defaults to ``frames``).
    ``trace``, when given, records attention side lengths for inspection.
    """
    B = frames.shape[0]
    if len(masks) != B:
        raise ValueError("one mask per clip required")
    grid = cfg.patch_grid
    vis_idx = np.stack([m.visible_index for m in masks])
    msk_idx = np.stack([m.masked_index for m in masks])
    if any(m.full.shape[0] != grid.num_tokens for m in masks):
        raise ValueError("mask does not match patch grid")

    x = _rows(embed(frames, P, cfg), vis_idx)
    if trace is not None:
        trace["encoder_tokens"] = x.shape[1]
    for i in range(cfg.enc_depth):
        x = encoder_block(x, P, cfg, i, rng)
    x = L.norm(x, P, "mae.enc.norm")

    y = L.linear(x, P, "mae.dec.proj") + _rows(T.broadcast_to(P["mae.dec.pos"], (B, *P["mae.dec.pos"].shape)), vis_idx)
    pos_m = _rows(T.broadcast_to(P["mae.dec.pos"], (B, *P["mae.dec.pos"].shape)), msk_idx)
    y = T.concat([y, pos_m + P["mae.dec.mask_token"]], axis=1)
    if trace is not None:
        trace["decoder_tokens"] = y.shape[1]
    for i in range(cfg.dec_depth):
        y = L.block(y, P, f"mae.dec.blocks.{i}", cfg.dec_heads)
    y = L.norm(y, P, "mae.dec.norm")
    M = msk_idx.shape[1]
    pred = L.linear(y[:, -M:, :], P, "mae.dec.head")

    src = frames if target is None else target
    tokens, _ = patchify(prepare_input(src, cfg), cfg.tube)
    if isinstance(tokens, Tensor):
        tgt = _rows(tokens, msk_idx)
    else:
        tgt = np.take_along_axis(tokens, msk_idx[..., None], axis=1)
    if cfg.normalize_targets:
        tgt = normalize_cubes(tgt)
    diff = pred - tgt
    loss = (diff * diff).mean()
    return pred, loss


# training --------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    steps: int = 0


def make_batch(data: DatasetSpec, indices, cfg: MaeConfig, tc: MaeTrainConfig, rng) -> np.ndarray:
    clips = []
    for i in indices:
        c = sample_clip(data.train[i], tc.clip_frames, tc.clip_rate,
                        start=None if tc.random_start else 0, rng=rng)
        c = multi_scale_crop(c, tc.scales, cfg.frame_size, rng)
        clips.append(c.frames)
    return np.stack(clips)


def mae_train(data: DatasetSpec, cfg: MaeConfig, tc: MaeTrainConfig,
              params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Masked reconstruction pretraining with warmup + cosine lr."""
    if not data.train:
        raise ValueError("dataset is empty")
    if tc.clip_frames != cfg.num_frames:
        raise ValueError("clip_frames must equal the model's num_frames")
    rng = np.random.default_rng(tc.seed)
    P = init_params(cfg, rng) if params is None else {k: v.copy() for k, v in params.items()}
    state = OptimState(base_lr=tc.lr, weight_decay=tc.weight_decay)
    warm = warmup_steps_for(tc.steps, tc.warmup_frac)
    grid = cfg.patch_grid
    out = TrainResult(P)
    n = len(data.train)
    for step in range(tc.steps):
        idx = rng.choice(n, size=min(tc.batch_size, n), replace=False) if tc.batch_size < n else np.arange(n)
        frames = make_batch(data, idx, cfg, tc, rng)
        masks = [tube_mask(grid, cfg.mask_ratio, rng) for _ in idx]
        Pt = T.param_tensors(P)
        _, loss = mae_forward(frames, masks, Pt, cfg, rng=rng if cfg.drop_path else None)
        grads = T.backward(loss, Pt)
        lr = warmup_cosine(step, tc.steps, warm, tc.lr)
        optimizer_step(P, grads, state, lr=lr)
        out.losses.append(loss.item())
        out.log.append(f"step {step} loss {loss.item():.6f}")
    out.steps = tc.steps
    return out
