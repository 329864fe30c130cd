"""Synthetic video-text corpus and dataset construction recipes.

Videos show one flat-colored shape drifting at constant velocity over a dim
per-video gradient background. The shape's geometry is the class; color, direction and speed
vary per instance and are spelled out in the caption, so every caption is
unique and contrastive/caption training has a learnable signal.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "bar")
# Four hues 90 degrees apart on a circle of radius 0.5 in the chroma plane
# around mid-gray: every channel mean is 0.5, so a grayscale view cannot
# tell them apart, and opposite hues (red/green, yellow/blue) are symmetric.
COLORS = {
    "red": (0.8536, 0.1464, 0.5),
    "yellow": (0.7041, 0.7041, 0.0918),
    "green": (0.1464, 0.8536, 0.5),
    "blue": (0.2959, 0.2959, 0.9082),
}
DIRECTIONS = {"right": (0.0, 1.0), "left": (0.0, -1.0), "down": (1.0, 0.0), "up": (-1.0, 0.0)}
SPEEDS = {"slow": 0.5, "fast": 1.0}

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
DEFAULT_VOCAB = (PAD, BOS, EOS, "a", "moving", *SHAPES, *COLORS, *DIRECTIONS, *SPEEDS)


class DataError(ValueError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, C], float in [0, 1]
    id: str
    labels: tuple[int, ...] = ()
    caption: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4 or min(self.frames.shape) < 1:
            raise DataError(f"clip {self.id}: frames must be [T,H,W,C] with positive extents")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetSpec:
    name: str
    train: list[VideoClip]
    test: list[VideoClip] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class SyntheticWorldSpec:
    num_classes: int = 4
    videos_per_class: int = 4
    frame_size: tuple[int, int] = (16, 16)
    frames_per_video: int = 16
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    seed: int = 0
    test_per_class: int = 0
    name: str = "synth"
    shapes: tuple[str, ...] = SHAPES
    # corner intensities of each video's smooth background are drawn from [0, level]
    background_level: float = 0.25


class Vocab:
    def __init__(self, tokens: Sequence[str] = DEFAULT_VOCAB):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for special in (PAD, BOS, EOS):
            if special not in self.index:
                raise DataError(f"vocab lacks special token {special}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.bos] + [self.index[w] for w in words] + [self.eos]
        except KeyError as exc:
            raise DataError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        words = []
        for i in ids:
            if i == self.eos:
                break
            if i not in (self.bos, self.pad):
                words.append(self.tokens[i])
        return tuple(words)


# rendering -----------------------------------------------------------------

_SUPERSAMPLE = 3


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, size: float) -> np.ndarray:
    r = size / 2
    ady, adx = np.abs(dy), np.abs(dx)
    if shape == "square":
        return (ady <= r) & (adx <= r)
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "triangle":
        return (ady <= r) & (adx <= (dy + r) / 2)
    if shape == "cross":
        return ((adx <= r / 3) & (ady <= r)) | ((ady <= r / 3) & (adx <= r))
    if shape == "diamond":
        return ady + adx <= r
    if shape == "bar":
        return (adx <= r) & (ady <= r / 3)
    raise DataError(f"unknown shape {shape!r}")


def shape_coverage(shape: str, centers: np.ndarray, size: float, frame_size: tuple[int, int]) -> np.ndarray:
    """Anti-aliased coverage ``[T, H, W]`` in [0, 1] of a shape at per-frame ``centers`` (y, x)."""
    H, W = frame_size
    s = _SUPERSAMPLE
    ys = (np.arange(H * s) + 0.5) / s
    xs = (np.arange(W * s) + 0.5) / s
    cover = np.zeros((len(centers), H, W))
    for t, (cy, cx) in enumerate(centers):
        m = _shape_mask(shape, ys[:, None] - cy, xs[None, :] - cx, size)
        cover[t] = m.reshape(H, s, W, s).mean(axis=(1, 3))
    return cover


def gradient_background(frame_size: tuple[int, int], corners: np.ndarray) -> np.ndarray:
    """Bilinear blend ``[H, W, 3]`` of four corner colors ``[2, 2, 3]``."""
    H, W = frame_size
    fy = np.linspace(0.0, 1.0, H)[:, None, None]
    fx = np.linspace(0.0, 1.0, W)[None, :, None]
    top = corners[0, 0] * (1 - fx) + corners[0, 1] * fx
    bot = corners[1, 0] * (1 - fx) + corners[1, 1] * fx
    return top * (1 - fy) + bot * fy


def render_shape(shape: str, color: Sequence[float], centers: np.ndarray, size: float,
                 frame_size: tuple[int, int], background: np.ndarray | None = None) -> np.ndarray:
    """Frames ``[T, H, W, 3]`` compositing the shape over ``background`` (black by default)."""
    cover = shape_coverage(shape, centers, size, frame_size)[..., None]
    bg = np.zeros((*frame_size, 3)) if background is None else background
    return bg[None] * (1 - cover) + np.asarray(color) * cover


def instance_attributes(i: int) -> tuple[str, str, str]:
    """(direction, speed, color) for instance ``i``; injective for i < 32."""
    dirs, speeds, colors = list(DIRECTIONS), list(SPEEDS), list(COLORS)
    d, s, q = i % 4, (i // 4) % 2, i // 8
    return dirs[d], speeds[s], colors[(3 * q + s + d) % 4]


def make_video(shape: str, cls: int, instance: int, frame_size: tuple[int, int], num_frames: int,
               rng: np.random.Generator, vid: str, direction: str | None = None,
               speed: str | None = None, color: str | None = None,
               background_level: float = 0.0) -> VideoClip:
    d0, s0, c0 = instance_attributes(instance)
    direction, speed, color = direction or d0, speed or s0, color or c0
    H, W = frame_size
    size = max(3.0, 0.3 * min(H, W))
    lo = size / 2 + 0.5
    hi_y, hi_x = H - size / 2 - 0.5, W - size / 2 - 0.5
    max_speed = (min(H, W) - size - 2) / max(num_frames - 1, 1)
    v = SPEEDS[speed] * max_speed * np.asarray(DIRECTIONS[direction])
    travel = np.abs(v) * (num_frames - 1)
    start = np.empty(2)
    for ax, hi in enumerate((hi_y, hi_x)):
        span_lo, span_hi = lo, hi - travel[ax]
        c = rng.uniform(span_lo, max(span_lo, span_hi))
        start[ax] = c + travel[ax] if v[ax] < 0 else c
    centers = start[None, :] + np.arange(num_frames)[:, None] * v[None, :]
    bg = None
    if background_level > 0:
        bg = gradient_background(frame_size, rng.uniform(0.0, background_level, size=(2, 2, 3)))
    frames = render_shape(shape, COLORS[color], centers, size, frame_size, bg)
    return VideoClip(frames=frames, id=vid, labels=(cls,), caption=(color, shape, "moving", direction, speed),
                     meta={"velocity": tuple(v), "start": tuple(start), "color": color, "size": size,
                           "direction": direction, "speed": speed, "shape": shape, "background": bg})


def gen_corpus(spec: SyntheticWorldSpec) -> DatasetSpec:
    """Deterministic labeled video-caption corpus for ``spec``."""
    H, W = spec.frame_size
    if H < 8 or W < 8:
        raise DataError("frame size must be at least 8x8 to render shapes")
    if spec.num_classes < 1 or spec.videos_per_class < 1 or spec.frames_per_video < 1:
        raise DataError("num_classes, videos_per_class and frames_per_video must be positive")
    if spec.num_classes > len(spec.shapes):
        raise DataError(f"at most {len(spec.shapes)} classes available")
    per_class = spec.videos_per_class + spec.test_per_class
    if per_class > 32:
        raise DataError("at most 32 unique captions per class")
    shapes = spec.shapes[: spec.num_classes]
    needed = set(shapes) | {"moving"} | set(COLORS) | set(DIRECTIONS) | set(SPEEDS)
    missing = needed - set(spec.vocab)
    if missing:
        raise DataError(f"vocab missing {sorted(missing)}")
    train, test = [], []
    for c, shape in enumerate(shapes):
        for i in range(per_class):
            index = c * per_class + i
            rng = np.random.default_rng([spec.seed, index])
            split = "train" if i < spec.videos_per_class else "test"
            clip = make_video(shape, c, i, spec.frame_size, spec.frames_per_video, rng,
                              vid=f"{spec.name}-{split}-c{c}-v{i}", background_level=spec.background_level)
            (train if split == "train" else test).append(clip)
    return DatasetSpec(spec.name, train, test, list(shapes))


XOR_COLORS = (("red", "yellow"), ("green", "blue"))
XOR_AXES = (("right", "left"), ("down", "up"))


def gen_xor_corpus(per_cell: int = 8, test_per_cell: int = 8, frame_size: tuple[int, int] = (16, 16),
                   num_frames: int = 16, shape: str = "square", seed: int = 0,
                   background_level: float = 0.25, name: str = "xor") -> DatasetSpec:
    """Binary task whose label is (motion axis bit) XOR (color group bit).

    Motion axis is horizontal (0) or vertical (1); the color group is
    red/yellow (0) or green/blue (1). All colors share the same channel mean,
    so a grayscale model only sees the axis and a single frame only the color.
    """
    if per_cell < 1 or test_per_cell < 0:
        raise DataError("per_cell must be positive")
    train, test = [], []
    index = 0
    for axis in (0, 1):
        for group in (0, 1):
            for i in range(per_cell + test_per_cell):
                rng = np.random.default_rng([seed, index])
                index += 1
                split = "train" if i < per_cell else "test"
                direction = XOR_AXES[axis][i % 2]
                color = XOR_COLORS[group][(i // 2) % 2]
                speed = list(SPEEDS)[(i // 4) % 2]
                clip = make_video(shape, axis ^ group, i, frame_size, num_frames, rng,
                                  vid=f"{name}-{split}-a{axis}-g{group}-v{i}", direction=direction,
                                  speed=speed, color=color, background_level=background_level)
                clip.meta.update(axis=axis, group=group)
                (train if split == "train" else test).append(clip)
    return DatasetSpec(name, train, test, ["same", "different"])


def relabel_by_meta(data: DatasetSpec, key: str, label_names: Sequence[str], name: str | None = None) -> DatasetSpec:
    """Replace every clip's label with the integer stored under ``meta[key]``."""
    def conv(c: VideoClip) -> VideoClip:
        return replace(c, labels=(int(c.meta[key]),))
    return DatasetSpec(name or f"{data.name}-{key}", [conv(c) for c in data.train], [conv(c) for c in data.test],
                       list(label_names))


def image_view(data: DatasetSpec, frame: int = 0, name: str | None = None) -> DatasetSpec:
    """Single-frame copies captioned ``a <class>``, for image-text co-training."""
    def conv(c: VideoClip) -> VideoClip:
        cls = data.label_names[c.labels[0]]
        return VideoClip(c.frames[frame:frame + 1].copy(), f"{c.id}-img", c.labels, ("a", cls), dict(c.meta))
    return DatasetSpec(name or f"{data.name}-img", [conv(c) for c in data.train],
                       [conv(c) for c in data.test], list(data.label_names))


# clip sampling & augmentation ------------------------------------------------

def clip_indices(length: int, frames: int, rate: int, start: int) -> np.ndarray:
    return (start + rate * np.arange(frames)) % length


def sample_clip(video: VideoClip, frames: int, rate: int, start: int | None = 0,
                rng: np.random.Generator | None = None) -> VideoClip:
    """Take ``frames`` frames every ``rate`` from ``start``; wraps cyclically.

    ``start=None`` draws the offset uniformly with ``rng``.
    """
    if frames < 1 or rate < 1:
        raise ValueError("frames and rate must be >= 1")
    n = video.num_frames
    if n == 0:
        raise DataError("empty video")
    if start is None:
        if rng is None:
            raise ValueError("random start needs an rng")
        start = int(rng.integers(0, n))
    idx = clip_indices(n, frames, rate, start)
    return replace(video, frames=video.frames[idx].copy())


def resize_bilinear(frames: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of ``[..., H, W, C]``; identity when sizes match."""
    H, W = frames.shape[-3], frames.shape[-2]
    h, w = out_size
    if (h, w) == (H, W):
        return frames.copy()

    def coords(n_in, n_out):
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = coords(H, h)
    x0, x1, fx = coords(W, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = frames[..., y0, :, :][..., :, x0, :] * (1 - fx) + frames[..., y0, :, :][..., :, x1, :] * fx
    bot = frames[..., y1, :, :][..., :, x0, :] * (1 - fx) + frames[..., y1, :, :][..., :, x1, :] * fx
    return top * (1 - fy) + bot * fy


def multi_scale_crop(clip: VideoClip, scales: Sequence[float], out_size: tuple[int, int],
                     rng: np.random.Generator) -> VideoClip:
    """Crop one randomly chosen relative scale at one random offset for all frames, then resize."""
    H, W = clip.frames.shape[1:3]
    h, w = out_size
    if h > H or w > W:
        raise ValueError(f"output size {out_size} exceeds source {H}x{W}")
    if not scales or any(not 0 < s <= 1 for s in scales):
        raise ValueError("scales must lie in (0, 1]")
    s = scales[int(rng.integers(0, len(scales)))]
    ch, cw = max(1, round(s * H)), max(1, round(s * W))
    if ch > H or cw > W:
        raise ValueError("crop larger than frame")
    oy = int(rng.integers(0, H - ch + 1))
    ox = int(rng.integers(0, W - cw + 1))
    crop = clip.frames[:, oy:oy + ch, ox:ox + cw, :]
    return replace(clip, frames=resize_bilinear(crop, out_size))


def repeated_sampling(batch: Sequence, factor: int, augment: Callable | None = None,
                      rng: np.random.Generator | None = None) -> list:
    """Repeat each sample ``factor`` times in a row, re-augmenting every copy."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = []
    for sample in batch:
        for _ in range(factor):
            out.append(augment(sample, rng) if augment is not None else sample)
    return out


# dataset recipes -------------------------------------------------------------

def _same_payload(a: VideoClip, b: VideoClip, names_a: list[str], names_b: list[str]) -> bool:
    return (a.frames.shape == b.frames.shape and np.array_equal(a.frames, b.frames)
            and a.caption == b.caption
            and sorted(names_a[i] for i in a.labels) == sorted(names_b[i] for i in b.labels))


def merge_label_spaces(sources: Sequence[DatasetSpec], name: str = "merged") -> DatasetSpec:
    """Union of training splits deduplicated by id, minus anything in any test split.

    Label ids are remapped into the union label space (ordered by first
    appearance). The same id with differing payloads raises ``DataError``.
    """
    if not sources:
        raise ValueError("need at least one source")
    label_names: list[str] = []
    for src in sources:
        for n in src.label_names:
            if n not in label_names:
                label_names.append(n)
    lookup = {n: i for i, n in enumerate(label_names)}
    test_ids = {c.id for src in sources for c in src.test}

    def remap(c: VideoClip, src: DatasetSpec) -> VideoClip:
        return replace(c, labels=tuple(lookup[src.label_names[i]] for i in c.labels))

    def union(split: str, exclude: set[str]) -> list[VideoClip]:
        seen: dict[str, tuple[VideoClip, DatasetSpec]] = {}
        out = []
        for src in sources:
            for c in getattr(src, split):
                if c.id in seen:
                    first, first_src = seen[c.id]
                    if not _same_payload(first, c, first_src.label_names, src.label_names):
                        raise DataError(f"sources disagree on payload of {c.id!r}")
                    continue
                seen[c.id] = (c, src)
                if c.id not in exclude:
                    out.append(remap(c, src))
        return out

    return DatasetSpec(name, union("train", test_ids), union("test", set()), label_names)


def split_video(video: VideoClip, every: int) -> list[VideoClip]:
    n = video.num_frames // every
    return [replace(video, frames=video.frames[k * every:(k + 1) * every].copy(), id=f"{video.id}#{k}")
            for k in range(n)]


def build_hybrid(components: Sequence[tuple[DatasetSpec, int | None, int | None]],
                 rng: np.random.Generator, name: str = "hybrid") -> DatasetSpec:
    """Unlabeled mixture: optionally cut each component into fixed-length segments, then subsample."""
    out: list[VideoClip] = []
    for data, take, split_every in components:
        pool = data.train
        if split_every is not None:
            pool = [seg for v in pool for seg in split_video(v, split_every)]
        if take is not None:
            if take > len(pool):
                raise DataError(f"take={take} exceeds {len(pool)} available in {data.name}")
            keep = np.sort(rng.choice(len(pool), size=take, replace=False))
            pool = [pool[i] for i in keep]
        out.extend(replace(c, labels=()) for c in pool)
    return DatasetSpec(name, out, [], [])


def cotrain_schedule(sizes: Sequence[int], steps: int) -> list[int]:
    """Deterministic size-proportional interleaving of dataset indices.

    Each step every accumulator gains its dataset's share of the total size;
    the largest (ties to the smallest index) is emitted and loses one. Exact
    rational arithmetic keeps long-run counts exactly proportional.
    """
    if not sizes or any(s <= 0 for s in sizes):
        raise ValueError("sizes must be positive")
    total = sum(sizes)
    share = [Fraction(s, total) for s in sizes]
    acc = [Fraction(0)] * len(sizes)
    out = []
    for _ in range(steps):
        acc = [a + p for a, p in zip(acc, share)]
        best = max(range(len(acc)), key=lambda i: (acc[i], -i))
        acc[best] -= 1
        out.append(best)
    return out


# on-disk corpus ----------------------------------------------------------------

MANIFEST = "manifest.txt"


def write_frames(path: Path, frames: np.ndarray) -> None:
    header = struct.pack("<4I", *frames.shape)
    path.write_bytes(header + frames.astype("<f4").tobytes())


def read_frames(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated frame payload")
    shape = struct.unpack("<4I", raw[:16])
    count = int(np.prod(shape))
    if len(raw) != 16 + 4 * count:
        raise DataError(f"{path}: payload size does not match header {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(shape).astype(np.float64)


def save_dataset(data: DatasetSpec, root: str | Path) -> Path:
    """Write manifest plus one binary payload per clip under ``root``."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = [f"# name {data.name}", f"# labels {' '.join(data.label_names)}"]
    for split in ("train", "test"):
        for k, c in enumerate(getattr(data, split)):
            rel = f"frames/{split}-{k:05d}.bin"
            write_frames(root / rel, c.frames)
            labels = ",".join(str(i) for i in c.labels) or "-"
            lines.append("\t".join([split, c.id, labels, " ".join(c.caption) or "-", rel]))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root


def load_dataset(root: str | Path) -> DatasetSpec:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    name, labels = root.name, []
    splits: dict[str, list[VideoClip]] = {"train": [], "test": []}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("# name "):
            name = line[len("# name "):]
            continue
        if line.startswith("# labels"):
            labels = line[len("# labels"):].split()
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[0] not in splits:
            raise DataError(f"{path}:{lineno}: malformed record")
        split, vid, lab, cap, rel = parts
        lab_ids = () if lab == "-" else tuple(int(x) for x in lab.split(","))
        caption = () if cap == "-" else tuple(cap.split(" "))
        splits[split].append(VideoClip(read_frames(root / rel), vid, lab_ids, caption))
    return DatasetSpec(name, splits["train"], splits["test"], labels)
