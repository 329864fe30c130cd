"""AdamW with layer-wise learning-rate decay, plus the lr rules used by every stage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


def scale_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return base_lr * batch_size / 256


def layer_scales(layer_decay: float, max_depth: int) -> list[float]:
    """Multiplier for depths ``0..max_depth``: ``layer_decay ** (max_depth - d)``."""
    return [layer_decay ** (max_depth - d) for d in range(max_depth + 1)]


def warmup_cosine(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine annealing to ``min_lr`` at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def warmup_steps_for(total_steps: int, fraction: float) -> int:
    return int(fraction * total_steps)


def default_decay_filter(name: str, value: np.ndarray) -> bool:
    # biases, norms, scalars and embeddings-as-vectors are exempt
    return value.ndim >= 2


@dataclass
class OptimState:
    base_lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    layer_decay: float = 1.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must lie in (0, 1]")


def optimizer_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState,
                   depth_index: Mapping[str, int] | Callable[[str], int] | None = None,
                   max_depth: int = 0, lr: float | None = None,
                   decay_filter: Callable[[str, np.ndarray], bool] = default_decay_filter) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    The learning rate for a parameter at depth ``d`` is
    ``lr * layer_decay ** (max_depth - d)``. ``lr`` defaults to
    ``state.base_lr``. Names absent from ``grads`` are left untouched.
    """
    lr = state.base_lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} != parameter shape {p.shape} for {name}")
        t = state.steps.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if depth_index is None:
            d = max_depth
        else:
            d = depth_index(name) if callable(depth_index) else depth_index[name]
        eff = lr * state.layer_decay ** (max_depth - d)
        new = p
        if state.weight_decay and decay_filter(name, p):
            new = new * (1 - eff * state.weight_decay)
        new = new - eff * (m_hat / (np.sqrt(v_hat) + state.eps))
        params[name] = new
        state.m[name] = m
        state.v[name] = v
        state.steps[name] = t
    return params
