"""Flat ``key=value`` run configuration shared by every CLI stage."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

SEED_ENV = "IVLAB_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # io
    data: str = ""  # dataset directory (comma-separated list for cotrain)
    out: str = ""  # output checkpoint, dataset directory or report file
    init: str = ""  # input checkpoint
    init2: str = ""  # second input checkpoint (multimodal for fuse, endpoint b for wise-ft)
    seed: int = 0

    # synthetic corpus
    corpus: str = "shapes"  # shapes | xor
    num_classes: int = 4
    videos_per_class: int = 8
    test_per_class: int = 0
    frames_per_video: int = 16
    frame_size: int = 16
    background_level: float = 0.25

    # masked encoder
    mae_channels: int = 3
    mae_frames: int = 8
    mae_rate: int = 2
    tube_t: int = 2
    tube_s: int = 4
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 4
    dec_heads: int = 4
    mask_ratio: float = 0.9
    normalize_targets: bool = True

    # multimodal encoder
    patch: int = 4
    vid_dim: int = 32
    vid_depth: int = 4
    vid_heads: int = 4
    global_blocks: int = 4
    text_dim: int = 32
    text_depth: int = 2
    embed_dim: int = 32
    temperature: float = 0.07
    cap_depth: int = 6
    cap_dim: int = 32
    lambda_cap: float = 1.0
    vlc_frames: int = 8
    vlc_rate: int = 2
    image_batch_size: int = 16

    # optimisation (shared; stage-specific meaning noted)
    steps: int = 300
    batch_size: int = 8
    lr: float = 2.5e-4  # peak lr for pretraining stages; base lr (scaled by batch/256) for posttrain
    warmup_frac: float = 0.1
    weight_decay: float = 0.05
    layer_decay: float = 0.8
    head_dropout: float = 0.5
    drop_path: float = 0.2
    repeat: int = 2
    scales: str = "1.0,0.875,0.75,0.66"
    loss: str = "auto"  # auto | edl
    multi_label: bool = False
    backbone: str = "mae"  # mae | vlc

    # fusion
    fuse_mm_frames: int = 8
    fuse_dropout: float = 0.0
    fuse_ema: float = 0.0

    # adaptation / evaluation
    alpha: float = 0.5  # wise-ft interpolation weight
    new_frame_size: int = 32
    new_frames: int = 0  # 0 keeps the temporal extent
    task: str = "retrieval"  # retrieval | zeroshot | classify
    split: str = "train"
    dual_softmax: float = 0.0  # temperature; 0 disables
    template: str = "a {}"
    report: str = ""  # machine-readable key=value summary

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def render(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()[:16]

    @property
    def scale_list(self) -> tuple[float, ...]:
        return tuple(float(s) for s in self.scales.split(","))


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str) -> object:
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_text(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = coerce(key, value.strip())
    return out


def resolve(path: str | Path | None = None, overrides: Mapping[str, object] | None = None,
            env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then the seed environment variable, then the file, then explicit overrides."""
    env = os.environ if env is None else env
    values: dict[str, object] = {}
    if env.get(SEED_ENV):
        values["seed"] = coerce("seed", env[SEED_ENV])
    if path:
        values.update(parse_text(Path(path).read_text()))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v) if isinstance(v, str) else v
    unknown = set(values) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**values)
