"""Datasets: factored synthetic image tasks and IDX files."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LabelError, SpecError
from .io import atomic_write

FACTORS = ("shape", "orientation", "color")
FACTOR_LEVELS = {"shape": 4, "orientation": 4, "color": 4}

# RGB tints, chosen so every pair differs in at least one channel by 0.5
COLORS = np.array(
    [
        [1.0, 0.25, 0.25],
        [0.25, 1.0, 0.25],
        [0.25, 0.25, 1.0],
        [1.0, 1.0, 0.25],
    ]
)


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,side,side] in [0,1]
    labels: np.ndarray  # [N] int64
    classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise LabelError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, dict(self.provenance))


@dataclass
class TaskSpec:
    """Factored-pattern task.

    ``class_map[c]`` gives, for class ``c``, the level of every active factor in
    the order of ``factors``.  Inactive factors are drawn at random per image.
    """

    factors: tuple[str, ...]
    class_map: tuple[tuple[int, ...], ...]
    noise: float = 0.1
    samples_per_class: int = 100
    seed: int = 0
    side: int = 16
    channels: int = 3

    def __post_init__(self):
        self.factors = tuple(self.factors)
        self.class_map = tuple(tuple(int(v) for v in row) for row in self.class_map)
        if not self.factors:
            raise SpecError("at least one active factor is required")
        unknown = set(self.factors) - set(FACTORS)
        if unknown or len(set(self.factors)) != len(self.factors):
            raise SpecError(f"bad factor list {self.factors}")
        if not 0.0 <= self.noise <= 0.5:
            raise SpecError(f"noise {self.noise} outside [0, 0.5]")
        if self.samples_per_class < 1 or len(self.class_map) < 2:
            raise SpecError("need >= 2 classes and >= 1 sample per class")
        for row in self.class_map:
            if len(row) != len(self.factors):
                raise SpecError(f"class entry {row} does not cover factors {self.factors}")
            for f, v in zip(self.factors, row):
                if not 0 <= v < FACTOR_LEVELS[f]:
                    raise SpecError(f"level {v} out of range for factor {f}")
        if len(set(self.class_map)) != len(self.class_map):
            raise SpecError("two classes share one factor configuration")
        if self.channels != 3 and "color" in self.factors:
            raise SpecError("the color factor needs 3 channels")

    @property
    def classes(self) -> int:
        return len(self.class_map)

    def to_dict(self) -> dict:
        return {
            "factors": list(self.factors),
            "class_map": [list(r) for r in self.class_map],
            "noise": self.noise,
            "samples_per_class": self.samples_per_class,
            "seed": self.seed,
            "side": self.side,
            "channels": self.channels,
        }


def single_factor_task(factor: str, **kw) -> TaskSpec:
    return TaskSpec((factor,), tuple((v,) for v in range(FACTOR_LEVELS[factor])), **kw)


def composite_task(levels: int = 2, **kw) -> TaskSpec:
    """All three factors active; ``levels`` values each, one class per combination."""
    rows = tuple(itertools.product(range(levels), repeat=len(FACTORS)))
    return TaskSpec(FACTORS, rows, **kw)


def _shape_mask(kind: int, side: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # disk
        return (dy**2 + dx**2) <= r**2
    if kind == 1:  # square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == 2:  # triangle, apex up
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    # plus sign
    arm = r * 0.35
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


def _stripes(kind: int, side: int, phase: float, period: float = 4.0) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    coord = (yy, xx, (yy + xx) / np.sqrt(2), (yy - xx) / np.sqrt(2))[kind]
    return 0.5 + 0.5 * np.cos(2 * np.pi * (coord / period + phase))


def render(
    shape: int, orientation: int, color: int, side: int, rng: np.random.Generator | None, channels: int = 3
) -> np.ndarray:
    """One clean image: a striped, tinted shape on a dim background.

    Size, position and stripe phase are jittered from ``rng``; with ``rng=None``
    the canonical centred rendering is returned.
    """
    if rng is None:
        r, cy, cx, phase = side * 0.32, side / 2, side / 2, 0.0
    else:
        r = side * rng.uniform(0.28, 0.36)
        cy = side / 2 + rng.uniform(-1.5, 1.5)
        cx = side / 2 + rng.uniform(-1.5, 1.5)
        phase = rng.uniform(0, 1)
    mask = _shape_mask(shape, side, cy, cx, r)
    texture = 0.35 + 0.65 * _stripes(orientation, side, phase)
    tint = COLORS[color] if channels == 3 else np.ones(channels)
    img = 0.1 * np.ones((channels, side, side))
    img = np.where(mask[None], tint[:, None, None] * texture[None], img)
    return img


def gen_synthetic_task(spec: TaskSpec) -> Dataset:
    """Deterministic dataset for ``spec``: exactly ``samples_per_class`` items per class.

    Pixels are quantized to multiples of 1/255 so the images survive an IDX
    round trip bit for bit.
    """
    rng = np.random.default_rng([spec.seed, 11])
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, spec.channels, spec.side, spec.side))
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    for idx, c in enumerate(labels):
        levels = {f: int(rng.integers(FACTOR_LEVELS[f])) for f in FACTORS}
        levels.update(zip(spec.factors, spec.class_map[c]))
        # noise 0 also switches off nuisance jitter
        jitter = rng if spec.noise > 0 else None
        img = render(levels["shape"], levels["orientation"], levels["color"], spec.side, jitter, spec.channels)
        if spec.noise > 0:
            img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
        images[idx] = img
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    prov = {"generator": "factored-pattern", **spec.to_dict()}
    return Dataset(images, labels, spec.classes, prov)


def train_test_split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint stratified split; each class contributes ``round(frac * count)`` training items."""
    rng = np.random.default_rng([seed, 13])
    train_idx, test_idx = [], []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(train_fraction * len(idx)))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr, te = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


# ---------------------------------------------------------------------------
# IDX

IDX_UBYTE = 0x08


def _write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    header = struct.pack(">BBBB", 0, 0, IDX_UBYTE, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    with atomic_write(path) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    zero, type_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or type_code != IDX_UBYTE or ndim < 1:
        raise FormatError(f"{path}: unsupported IDX magic {raw[:4].hex()}")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    count = int(np.prod(dims))
    if len(raw) - end != count:
        raise FormatError(f"{path}: expected {count} bytes of data, found {len(raw) - end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=end).reshape(dims)


def write_idx(images_path, labels_path, ds: Dataset) -> None:
    """Write ``ds`` as unsigned-byte IDX files (images [N,C,H,W], or [N,H,W] when C == 1)."""
    pixels = np.round(ds.images * 255.0)
    if ds.images.shape[1] == 1:
        pixels = pixels[:, 0]
    _write_idx(images_path, pixels)
    _write_idx(labels_path, ds.labels)


def load_idx(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0,1].

    Accepts 3-d image files (magic 0x00000803, single channel) and 4-d files
    (0x00000804, [N,C,H,W]).
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: labels must be 1-d (magic 0x00000801)")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    labels = labels.astype(np.int64)
    classes = classes if classes is not None else int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images.astype(np.float64) / 255.0, labels, classes,
                   {"images": str(images_path), "labels": str(labels_path)})
