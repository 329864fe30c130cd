"""Downstream adaptation and evaluation protocols."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor


# position-embedding resampling ---------------------------------------------------

@dataclass
class PosEmbed:
    grid: tuple[int, int, int]
    table: np.ndarray  # [T'*H'*W', d], τ-major

    def __post_init__(self):
        if self.table.shape[0] != int(np.prod(self.grid)):
            raise ValueError(f"table has {self.table.shape[0]} rows for grid {self.grid}")


def _cubic_kernel(x: np.ndarray, a: float = -0.75) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _source_positions(n_in: int, n_out: int) -> np.ndarray:
    # align-corners: first and last samples coincide
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resample_cubic(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr.copy()
    pos = _source_positions(n_in, n_out)
    base = np.floor(pos).astype(int)
    frac = pos - base
    W = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = np.clip(base + off, 0, n_in - 1)
        np.add.at(W, (np.arange(n_out), idx), _cubic_kernel(frac - off))
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ W.T, -1, axis)


def resample_linear(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr.copy()
    pos = _source_positions(n_in, n_out)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = pos - i0
    W = np.zeros((n_out, n_in))
    np.add.at(W, (np.arange(n_out), i0), 1 - f)
    np.add.at(W, (np.arange(n_out), i1), f)
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ W.T, -1, axis)


def interpolate_pos_embed(pe: PosEmbed, dst_grid: tuple[int, int, int]) -> PosEmbed:
    """Bicubic over (H', W') per temporal slice, then linear over T', endpoints aligned."""
    if min(dst_grid) < 1:
        raise ValueError("grid extents must be >= 1")
    t, h, w = pe.grid
    t2, h2, w2 = dst_grid
    d = pe.table.shape[1]
    x = pe.table.reshape(t, h, w, d)
    x = resample_cubic(x, 1, h2)
    x = resample_cubic(x, 2, w2)
    x = resample_linear(x, 0, t2)
    return PosEmbed(tuple(dst_grid), x.reshape(t2 * h2 * w2, d))


# retrieval ---------------------------------------------------------------------

def diagonal_ranks(S: np.ndarray, direction: str = "t2v") -> np.ndarray:
    """0-based rank of each ground-truth (diagonal) entry.

    ``S[i, j]`` scores text ``i`` against video ``j``: t2v ranks within rows,
    v2t within columns. Equal scores at a smaller index rank earlier.
    """
    S = np.asarray(S, dtype=float)
    if direction == "v2t":
        S = S.T
    elif direction != "t2v":
        raise ValueError(f"unknown direction {direction!r}")
    n = S.shape[0]
    diag = S[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(n)[None, :]
    ahead = (S > diag) | ((S == diag) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(S: np.ndarray, k: int, direction: str = "t2v") -> float:
    n = np.asarray(S).shape[0]
    if k > n or k < 1:
        raise ValueError(f"k={k} outside [1, {n}]")
    return float(np.mean(diagonal_ranks(S, direction) < k))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def dual_softmax(S: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Elementwise product of the row-wise and column-wise softmax of ``S / temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise T.NumericError("non-finite similarity")
    z = S / temperature
    return _softmax(z, 1) * _softmax(z, 0)


def retrieval_metrics(S: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    out = {}
    n = S.shape[0]
    for k in ks:
        if k <= n:
            out[f"r@{k}_t2v"] = recall_at_k(S, k, "t2v")
            out[f"r@{k}_v2t"] = recall_at_k(S, k, "v2t")
    return out


# zero-shot -----------------------------------------------------------------------

def zero_shot_predict(video_emb: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    """Index of the most similar class text per video; ties go to the smaller index."""
    if len(class_emb) == 0:
        raise ValueError("empty class list")
    return np.argmax(video_emb @ class_emb.T, axis=1)


def multiple_choice(video_emb: np.ndarray, candidate_emb: np.ndarray) -> int:
    if len(candidate_emb) < 1:
        raise ValueError("empty candidate list")
    return int(np.argmax(candidate_emb @ video_emb))


def zero_shot_classify(clips, class_names: Sequence[str], params, cfg, vocab, template: str = "a {}",
                       frames: int | None = None) -> tuple[np.ndarray, float]:
    from . import vlc

    if not class_names:
        raise ValueError("empty class list")
    prompts = [vocab.encode(template.format(n).split()) for n in class_names]
    cls = vlc.embed_texts(prompts, params, cfg, vocab.pad)
    vids = vlc.embed_clips(clips, params, cfg, frames or min(c.num_frames for c in clips))
    pred = zero_shot_predict(vids, cls)
    labels = np.array([c.labels[0] for c in clips])
    return pred, float(np.mean(pred == labels))


# VQA head --------------------------------------------------------------------------

def init_vqa(store: dict, in_dim: int, hidden: int, num_answers: int, rng: np.random.Generator,
             zero: bool = False) -> None:
    L.init_linear(store, "vqa.fc1", in_dim, hidden, rng, zero=zero)
    L.init_linear(store, "vqa.fc2", hidden, hidden, rng, zero=zero)
    L.init_linear(store, "vqa.fc3", hidden, num_answers, rng, zero=zero)


def vqa_param_count(in_dim: int, hidden: int, num_answers: int) -> int:
    return in_dim * hidden + hidden + hidden * hidden + hidden + hidden * num_answers + num_answers


def vqa_head(video_emb, text_emb, fused_feature, P) -> Tensor:
    """Three-layer MLP over the concatenated video, question and fused features."""
    x = T.concat([T.as_tensor(video_emb), T.as_tensor(text_emb), T.as_tensor(fused_feature)], axis=-1)
    if x.shape[-1] != P["vqa.fc1.w"].shape[0]:
        raise ValueError(f"feature width {x.shape[-1]} != head input {P['vqa.fc1.w'].shape[0]}")
    x = T.gelu(L.linear(x, P, "vqa.fc1"))
    x = T.gelu(L.linear(x, P, "vqa.fc2"))
    return L.linear(x, P, "vqa.fc3")


# evidential head ---------------------------------------------------------------------

@dataclass
class EvidentialOutput:
    evidence: Tensor
    alpha: Tensor
    strength: Tensor  # sum of alpha, keepdims

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[-1]

    @property
    def uncertainty(self) -> np.ndarray:
        return self.num_classes / self.strength.data[..., 0]

    @property
    def probs(self) -> np.ndarray:
        return self.alpha.data / self.strength.data


def edl_head(logits) -> EvidentialOutput:
    logits = T.as_tensor(logits)
    if logits.shape[-1] < 2:
        raise ValueError("need at least two classes")
    evidence = T.softplus(logits)
    alpha = evidence + 1.0
    return EvidentialOutput(evidence, alpha, alpha.sum(axis=-1, keepdims=True))


def edl_from_evidence(evidence) -> EvidentialOutput:
    evidence = T.as_tensor(evidence)
    alpha = evidence + 1.0
    return EvidentialOutput(evidence, alpha, alpha.sum(axis=-1, keepdims=True))


def edl_loss(out: EvidentialOutput, labels) -> Tensor:
    """Dirichlet expected cross-entropy ``sum_k y_k (ln S - ln alpha_k)``, batch-averaged."""
    labels = np.atleast_1d(np.asarray(labels))
    alpha = out.alpha if out.alpha.ndim == 2 else out.alpha.reshape(1, -1)
    strength = out.strength if out.strength.ndim == 2 else out.strength.reshape(1, 1)
    picked = T.gather(alpha, labels.reshape(-1, 1), axis=1)
    return (T.log(strength) - T.log(picked)).mean()


def openset_eval(known_uncerts: Sequence[float], unknown_uncerts: Sequence[float],
                 keep: float = 0.95) -> tuple[float, float]:
    """Nearest-rank threshold keeping ``keep`` of the known set, and pairwise open-set AUC."""
    known = np.asarray(known_uncerts, dtype=float)
    unknown = np.asarray(unknown_uncerts, dtype=float)
    if known.size == 0 or unknown.size == 0:
        raise ValueError("both uncertainty lists must be non-empty")
    if not 0 < keep < 1:
        raise ValueError("keep must lie in (0, 1)")
    rank = math.ceil(keep * known.size)
    threshold = float(np.sort(known)[rank - 1])
    greater = (unknown[:, None] > known[None, :]).sum()
    ties = (unknown[:, None] == known[None, :]).sum()
    auc = (greater + 0.5 * ties) / (known.size * unknown.size)
    return threshold, float(auc)


# weight-space ensembling ---------------------------------------------------------------

def wise_ft(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], alpha: float) -> dict[str, np.ndarray]:
    """Elementwise ``(1 - alpha) * a + alpha * b`` over identical parameter sets."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if set(a) != set(b):
        raise ValueError(f"parameter names differ: {sorted(set(a) ^ set(b))[:5]}")
    out = {}
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")
        out[k] = (1 - alpha) * a[k] + alpha * b[k]
    return out


def resize_mae_pos(params: Mapping[str, np.ndarray], cfg, frame_size: tuple[int, int],
                   num_frames: int | None = None) -> tuple[dict[str, np.ndarray], object]:
    """Resample encoder and decoder position tables of a masked encoder to a new input geometry."""
    from dataclasses import replace

    new_cfg = replace(cfg, frame_size=tuple(frame_size), num_frames=num_frames or cfg.num_frames)
    src, dst = cfg.patch_grid.grid, new_cfg.patch_grid.grid
    out = dict(params)
    for key in ("mae.pos", "mae.dec.pos"):
        if key in out:
            out[key] = interpolate_pos_embed(PosEmbed(src, out[key]), dst).table
    return out, new_cfg


def resize_vlc_pos(params: Mapping[str, np.ndarray], src_side: int, dst_side: int,
                   num_frames: int | None = None) -> dict[str, np.ndarray]:
    """Bicubic resample of the multimodal encoder's spatial table; linear over time when ``num_frames`` is set."""
    out = dict(params)
    pe = PosEmbed((1, src_side, src_side), out["vlc.vid.pos_s"])
    out["vlc.vid.pos_s"] = interpolate_pos_embed(pe, (1, dst_side, dst_side)).table
    if num_frames:
        out["vlc.vid.pos_t"] = resample_linear(out["vlc.vid.pos_t"], 0, num_frames)
    return out
