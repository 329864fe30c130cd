"""Supervised post-pretraining: linear heads over either encoder, and multi-dataset co-training."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import layers as L
from . import mae, vlc
from . import tensor as T
from .data import DatasetSpec, VideoClip, cotrain_schedule, multi_scale_crop, sample_clip
from .optim import OptimState, optimizer_step, scale_lr, warmup_cosine, warmup_steps_for
from .tensor import Tensor

LOG_FLOOR = 1e-12


# backbones --------------------------------------------------------------------

@dataclass
class Backbone:
    """Which encoder feeds the heads, and how clips are sampled for it."""
    kind: str  # "mae" | "vlc"
    cfg: object
    frames: int = 8
    rate: int = 2

    def __post_init__(self):
        if self.kind not in ("mae", "vlc"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "mae" and self.frames != self.cfg.num_frames:
            raise ValueError("frames must equal the masked encoder's num_frames")

    @property
    def dim(self) -> int:
        return self.cfg.enc_dim if self.kind == "mae" else self.cfg.vid_dim

    @property
    def max_depth(self) -> int:
        return self.cfg.enc_depth + 1 if self.kind == "mae" else self.cfg.vid_depth + 1

    def owns(self, name: str) -> bool:
        if self.kind == "mae":
            return name.startswith("mae.") and not name.startswith("mae.dec.")
        return name.startswith("vlc.vid.")

    def depth(self, name: str) -> int:
        if not self.owns(name):
            return self.max_depth
        return mae.depth_index(name, self.cfg) if self.kind == "mae" else vlc.depth_index(name, self.cfg)

    def features(self, frames, P, rng=None) -> Tensor:
        """Clip representation ``[B, dim]``: mean token for MAE, normed class token for VLC."""
        if self.kind == "mae":
            return mae.encode(frames, P, self.cfg, rng).mean(axis=1)
        return L.norm(vlc.encode_video(frames, P, self.cfg).class_token, P, "vlc.vid.norm")


# heads and losses ---------------------------------------------------------------

@dataclass(frozen=True)
class HeadSpec:
    dataset: str
    num_classes: int
    multi_label: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a head needs at least two classes")

    @property
    def prefix(self) -> str:
        return f"head.{self.dataset}"

    @property
    def names(self) -> tuple[str, str]:
        return f"{self.prefix}.w", f"{self.prefix}.b"


@dataclass(frozen=True)
class AslParams:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")


def init_head(store: dict, spec: HeadSpec, dim: int, rng: np.random.Generator, zero: bool = False) -> None:
    L.init_linear(store, spec.prefix, dim, spec.num_classes, rng, zero=zero)


def ce_loss(logits, labels) -> Tensor:
    """Softmax cross-entropy, averaged over the batch. Accepts ``[K]`` or ``[B, K]``."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    K = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("one label per row required")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"label outside [0, {K})")
    picked = T.gather(T.log_softmax(logits, axis=-1), labels.reshape(-1, 1), axis=1)
    return -picked.mean()


def asl_loss(logits, targets, p: AslParams = AslParams()) -> Tensor:
    """Asymmetric multi-label loss, averaged over classes (and batch)."""
    logits = T.as_tensor(logits)
    y = np.asarray(targets, dtype=float)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be multi-hot")
    s = T.sigmoid(logits)
    pm = T.maximum(s - p.margin, 0.0)
    pos = T.power(1.0 - s, p.gamma_pos) * T.log(T.maximum(s, LOG_FLOOR))
    neg = T.power(pm, p.gamma_neg) * T.log(T.maximum(1.0 - pm, LOG_FLOOR))
    return -(pos * y + neg * (1.0 - y)).mean()


def multi_hot(labels: Sequence[int], K: int) -> np.ndarray:
    out = np.zeros(K)
    out[list(labels)] = 1.0
    return out


def head_loss(logits: Tensor, clips: Sequence[VideoClip], spec: HeadSpec, asl: AslParams,
              kind: str = "auto") -> Tensor:
    """``auto`` picks ASL for multi-label heads and CE otherwise; ``edl`` trains an evidential head."""
    if kind == "edl":
        from .evaluation import edl_head, edl_loss
        return edl_loss(edl_head(logits), [c.labels[0] for c in clips])
    if kind != "auto":
        raise ValueError(f"unknown loss {kind!r}")
    if spec.multi_label:
        return asl_loss(logits, np.stack([multi_hot(c.labels, spec.num_classes) for c in clips]), asl)
    return ce_loss(logits, [c.labels[0] for c in clips])


def multi_label_view(data: DatasetSpec, name: str | None = None) -> DatasetSpec:
    """Tag every clip with its class and its colour, giving a multi-label dataset."""
    colors = sorted({c.meta["color"] for c in data.train + data.test})
    base = len(data.label_names)

    def conv(c: VideoClip) -> VideoClip:
        return replace(c, labels=(c.labels[0], base + colors.index(c.meta["color"])))

    return DatasetSpec(name or f"{data.name}-ml", [conv(c) for c in data.train], [conv(c) for c in data.test],
                       list(data.label_names) + colors)


# training ---------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    steps: int = 400
    batch_size: int = 8
    base_lr: float = 1e-3
    layer_decay: float = 0.8
    head_dropout: float = 0.5
    drop_path: float = 0.2
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    repeat: int = 2
    scales: tuple[float, ...] = (1.0, 0.875, 0.75, 0.66)
    asl: AslParams = AslParams()
    loss: str = "auto"  # or "edl"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % self.repeat:
            raise ValueError("batch_size must be a multiple of repeat")

    @property
    def peak_lr(self) -> float:
        return scale_lr(self.base_lr, self.batch_size)


@dataclass
class PosttrainResult:
    params: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    head_steps: dict[str, int] = field(default_factory=dict)
    backbone_state: OptimState | None = None
    head_states: dict[str, OptimState] = field(default_factory=dict)


def _train_backbone(backbone: Backbone, drop_path: float) -> Backbone:
    if backbone.kind == "mae":
        return replace(backbone, cfg=replace(backbone.cfg, drop_path=drop_path))
    return backbone


def sample_batch(data: DatasetSpec, backbone: Backbone, cfg: FinetuneConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, list[VideoClip]]:
    """Draw ``batch_size / repeat`` clips and augment each ``repeat`` times."""
    n = len(data.train)
    unique = cfg.batch_size // cfg.repeat
    idx = np.arange(n) if unique >= n else np.sort(rng.choice(n, size=unique, replace=False))
    size = tuple(backbone.cfg.frame_size)
    frames, clips = [], []
    for i in idx:
        src = data.train[i]
        for _ in range(cfg.repeat):
            c = sample_clip(src, backbone.frames, backbone.rate, start=None, rng=rng)
            frames.append(multi_scale_crop(c, cfg.scales, size, rng).frames)
            clips.append(src)
    return np.stack(frames), clips


def _step(P: dict, backbone: Backbone, spec: HeadSpec, data: DatasetSpec, cfg: FinetuneConfig,
          rng: np.random.Generator) -> tuple[Tensor, dict[str, np.ndarray], dict[str, np.ndarray]]:
    names = [k for k in P if backbone.owns(k)]
    trainable = names + list(spec.names)
    Pt = T.param_tensors(P, trainable)
    x, clips = sample_batch(data, backbone, cfg, rng)
    feat = _train_backbone(backbone, cfg.drop_path).features(x, Pt, rng)
    logits = L.linear(L.dropout(feat, cfg.head_dropout, rng), Pt, spec.prefix)
    loss = head_loss(logits, clips, spec, cfg.asl, cfg.loss)
    grads = T.backward(loss, {k: Pt[k] for k in trainable})
    head_grads = {k: grads.pop(k) for k in spec.names}
    return loss, grads, head_grads


def finetune(params: dict[str, np.ndarray], backbone: Backbone, data: DatasetSpec, cfg: FinetuneConfig,
             spec: HeadSpec | None = None) -> PosttrainResult:
    """Attach one linear head and train it together with the encoder."""
    if not data.train:
        raise ValueError("dataset is empty")
    spec = spec or HeadSpec(data.name, len(data.label_names))
    rng = np.random.default_rng(cfg.seed)
    P = {k: v.copy() for k, v in params.items()}
    if spec.names[0] not in P:
        init_head(P, spec, backbone.dim, rng, zero=True)
    state = OptimState(base_lr=cfg.peak_lr, weight_decay=cfg.weight_decay, layer_decay=cfg.layer_decay)
    warm = warmup_steps_for(cfg.steps, cfg.warmup_frac)
    out = PosttrainResult(P, backbone_state=state)
    for step in range(cfg.steps):
        loss, grads, head_grads = _step(P, backbone, spec, data, cfg, rng)
        lr = warmup_cosine(step, cfg.steps, warm, cfg.peak_lr)
        grads.update(head_grads)
        optimizer_step(P, grads, state, depth_index=backbone.depth, max_depth=backbone.max_depth, lr=lr)
        out.losses.append(loss.item())
        out.log.append(f"step {step} loss {loss.item():.6f}")
    out.head_steps[spec.dataset] = cfg.steps
    return out


def cotrain(params: dict[str, np.ndarray], backbone: Backbone, datasets: Sequence[DatasetSpec],
            cfg: FinetuneConfig, specs: Sequence[HeadSpec] | None = None) -> PosttrainResult:
    """Size-proportional alternation over datasets, one head and optimizer per dataset.

    The backbone has a single optimizer state updated on every step; each
    head's state only advances on its own dataset's steps.
    """
    if len(datasets) < 2:
        raise ValueError("co-training needs at least two datasets")
    if any(not d.train for d in datasets):
        raise ValueError("every dataset must be non-empty")
    specs = list(specs) if specs is not None else [HeadSpec(d.name, len(d.label_names)) for d in datasets]
    if len({s.dataset for s in specs}) != len(specs) or len(specs) != len(datasets):
        raise ValueError("need exactly one uniquely named head per dataset")
    rng = np.random.default_rng(cfg.seed)
    P = {k: v.copy() for k, v in params.items()}
    for s in specs:
        if s.names[0] not in P:
            init_head(P, s, backbone.dim, rng, zero=True)
    bstate = OptimState(base_lr=cfg.peak_lr, weight_decay=cfg.weight_decay, layer_decay=cfg.layer_decay)
    hstates = {s.dataset: OptimState(base_lr=cfg.peak_lr, weight_decay=cfg.weight_decay) for s in specs}
    order = cotrain_schedule([len(d.train) for d in datasets], cfg.steps)
    warm = warmup_steps_for(cfg.steps, cfg.warmup_frac)
    out = PosttrainResult(P, head_steps={s.dataset: 0 for s in specs}, backbone_state=bstate, head_states=hstates)
    for step, d in enumerate(order):
        spec = specs[d]
        loss, grads, head_grads = _step(P, backbone, spec, datasets[d], cfg, rng)
        lr = warmup_cosine(step, cfg.steps, warm, cfg.peak_lr)
        optimizer_step(P, grads, bstate, depth_index=backbone.depth, max_depth=backbone.max_depth, lr=lr)
        optimizer_step(P, head_grads, hstates[spec.dataset], lr=lr)
        out.head_steps[spec.dataset] += 1
        out.losses.append(loss.item())
        out.log.append(f"step {step} loss {loss.item():.6f} dataset {spec.dataset}")
    return out


# evaluation ---------------------------------------------------------------------

def predict_logits(params: dict[str, np.ndarray], backbone: Backbone, spec: HeadSpec,
                   clips: Sequence[VideoClip], batch: int = 16) -> np.ndarray:
    """Deterministic (first-frame start, full view) logits for each clip."""
    Pt = T.param_tensors(params, ())
    out = []
    for s in range(0, len(clips), batch):
        x = np.stack([sample_clip(c, backbone.frames, backbone.rate, start=0).frames for c in clips[s:s + batch]])
        out.append(L.linear(backbone.features(x, Pt), Pt, spec.prefix).data)
    return np.concatenate(out)


def top1(logits: np.ndarray, clips: Sequence[VideoClip]) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.array([c.labels[0] for c in clips])))
