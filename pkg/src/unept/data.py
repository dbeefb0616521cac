"""Synthetic shape scenes, binary PPM/PGM files and training-time augmentation."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .boundary import IGNORE, NO_DIRECTION, BoundaryTargets, bin_to_offset

PathLike = Union[str, os.PathLike]

SHAPE_KINDS = ("rectangle", "disc", "triangle")

# Class colours for the first classes; further classes draw from a fixed stream.
BASE_COLORS = np.array([
    [0.15, 0.15, 0.15],
    [0.90, 0.25, 0.20],
    [0.25, 0.80, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.85, 0.25],
    [0.80, 0.30, 0.85],
    [0.25, 0.85, 0.85],
    [0.95, 0.60, 0.20],
])


def class_colors(k: int) -> np.ndarray:
    if k <= len(BASE_COLORS):
        return BASE_COLORS[:k].copy()
    extra = np.random.default_rng(7).uniform(0.1, 0.9, size=(k - len(BASE_COLORS), 3))
    return np.concatenate([BASE_COLORS, extra])


@dataclass
class SceneSpec:
    size: int = 64
    min_shapes: int = 2
    max_shapes: int = 5
    kinds: Tuple[str, ...] = SHAPE_KINDS
    num_classes: int = 4
    noise: float = 0.05
    min_extent: int = 14
    max_extent: int = 32
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kinds, str):
            self.kinds = tuple(k for k in self.kinds.split(",") if k)
        self.kinds = tuple(self.kinds)
        if self.size <= 0 or self.size % 32:
            raise ValueError(f"canvas size must be a positive multiple of 32, got {self.size}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.num_classes < 2 or self.num_classes > 255:
            raise ValueError("num_classes must lie in [2, 255]")
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if not 1 <= self.min_extent <= self.max_extent <= self.size:
            raise ValueError("need 1 <= min_extent <= max_extent <= size")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class Shape:
    kind: str
    label: int
    params: Tuple[float, ...]


@dataclass
class Sample:
    image: np.ndarray               # 3 x H x W in [0, 1]
    labels: np.ndarray              # H x W uint8, IGNORE allowed
    targets: Optional[BoundaryTargets] = None
    shapes: List[Shape] = field(default_factory=list)

    def __post_init__(self):
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


# -- scene generation -------------------------------------------------------------

def _shape_mask(kind: str, params: Sequence[float], size: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    if kind == "rectangle":
        top, left, h, w = params
        return (ys >= top) & (ys < top + h) & (xs >= left) & (xs < left + w)
    if kind == "disc":
        cy, cx, r = params
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if kind == "triangle":
        y0, x0, y1, x1, y2, x2 = params

        def edge(ay, ax, by, bx):
            return (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)

        e0, e1, e2 = edge(y0, x0, y1, x1), edge(y1, x1, y2, x2), edge(y2, x2, y0, x0)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ValueError(f"unknown shape kind {kind!r}")


def _draw_params(kind: str, spec: SceneSpec, rng: np.random.Generator) -> Tuple[float, ...]:
    s, lo, hi = spec.size, spec.min_extent, spec.max_extent
    if kind == "rectangle":
        h, w = rng.integers(lo, hi + 1, size=2)
        top = rng.integers(0, s - h + 1)
        left = rng.integers(0, s - w + 1)
        return float(top), float(left), float(h), float(w)
    if kind == "disc":
        r = rng.uniform(lo / 2, hi / 2)
        cy, cx = rng.uniform(r, s - r, size=2)
        return float(cy), float(cx), float(r)
    extent = rng.uniform(lo, hi)
    cy, cx = rng.uniform(extent / 2, s - extent / 2, size=2)
    start = rng.uniform(0, 2 * np.pi)
    # roughly equilateral so corners are not needle-thin
    angles = start + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, size=3)
    r = extent / 2
    pts = [(cy + r * np.sin(a), cx + r * np.cos(a)) for a in angles]
    return tuple(float(v) for p in pts for v in p)


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Scene ``index`` of the stream defined by ``spec``; background is class 0
    and later shapes occlude earlier ones."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.size
    labels = np.zeros((s, s), dtype=np.uint8)
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shapes = []
    for _ in range(n):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        label = int(rng.integers(1, spec.num_classes))
        params = _draw_params(kind, spec, rng)
        labels[_shape_mask(kind, params, s)] = label
        shapes.append(Shape(kind, label, params))
    colors = class_colors(spec.num_classes)
    image = colors[labels].transpose(2, 0, 1)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return Sample(np.clip(image, 0.0, 1.0), labels, None, shapes)


def generate_split(spec: SceneSpec, start: int, count: int) -> List[Sample]:
    return [generate_scene(spec, start + i) for i in range(count)]


# -- netpbm -----------------------------------------------------------------------------

class NetpbmError(ValueError):
    pass


def _read_header(buf: bytes, magic: bytes) -> Tuple[int, int, int, int]:
    """Parse magic, width, height, maxval; return them with the payload offset."""
    if buf[:2] != magic:
        raise NetpbmError(f"expected magic {magic!r}, found {buf[:2]!r}")
    pos, values = 2, []
    while len(values) < 3:
        if pos >= len(buf):
            raise NetpbmError("truncated header")
        c = buf[pos:pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise NetpbmError("unterminated comment in header")
            pos = end + 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(buf[start:pos]))
        else:
            raise NetpbmError(f"unexpected byte {c!r} in header")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval")
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def _read(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, _, offset = _read_header(buf, magic)
    need = width * height * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def quantize_image(image: np.ndarray) -> np.ndarray:
    """3 x H x W floats in [0, 1] -> H x W x 3 bytes."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_ppm(path: PathLike, image: np.ndarray) -> None:
    """Write a 3 x H x W float image (or H x W x 3 uint8) as binary P6."""
    image = np.asarray(image)
    rgb = image if image.dtype == np.uint8 and image.shape[-1] == 3 else quantize_image(image)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes())


def load_ppm(path: PathLike) -> np.ndarray:
    """Read binary P6 into a 3 x H x W float image in [0, 1]."""
    return _read(path, b"P6", 3).transpose(2, 0, 1) / 255.0


def save_pgm(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("PGM holds a single 2-D channel")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def load_pgm(path: PathLike) -> np.ndarray:
    return _read(path, b"P5", 1).copy()


# -- augmentation ----------------------------------------------------------------------------

def _source_positions(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image.copy()

    def weights(n_in, n_out):
        pos = np.clip(_source_positions(n_in, n_out), 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = weights(h, out_h)
    x0, x1, fx = weights(w, out_w)
    rows = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape
    yi = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
    xi = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
    return labels[yi][:, xi]


def apply_augmentation(sample: Sample, ratio: float, flip: bool, crop: Tuple[int, int],
                       size: Optional[int] = None) -> Sample:
    """Rescale by ``ratio``, optionally mirror, then crop at ``crop`` (top, left)
    or pad bottom/right to a ``size`` x ``size`` canvas."""
    _, h, w = sample.image.shape
    size = size or h
    nh, nw = max(1, int(round(h * ratio))), max(1, int(round(w * ratio)))
    image = resize_bilinear(sample.image, nh, nw)
    labels = resize_nearest(sample.labels, nh, nw)
    if flip:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    top, left = crop
    image = image[:, top:top + size, left:left + size]
    labels = labels[top:top + size, left:left + size]
    out_img = np.zeros((3, size, size))
    out_lab = np.full((size, size), IGNORE, dtype=np.uint8)
    out_img[:, :image.shape[1], :image.shape[2]] = image
    out_lab[:labels.shape[0], :labels.shape[1]] = labels
    return Sample(out_img, out_lab)


def augment(sample: Sample, rng: np.random.Generator, size: Optional[int] = None,
            ratio_range: Tuple[float, float] = (0.5, 2.0), flip_prob: float = 0.5) -> Sample:
    _, h, w = sample.image.shape
    size = size or h
    ratio = float(rng.uniform(*ratio_range))
    flip = bool(rng.random() < flip_prob)
    nh, nw = max(1, int(round(h * ratio))), max(1, int(round(w * ratio)))
    top = int(rng.integers(0, max(nh - size, 0) + 1))
    left = int(rng.integers(0, max(nw - size, 0) + 1))
    return apply_augmentation(sample, ratio, flip, (top, left), size)


# -- dataset directories ---------------------------------------------------------------------

MANIFEST = "dataset.txt"


def write_manifest(path: PathLike, spec: SceneSpec, counts: dict) -> None:
    lines = []
    for f in fields(spec):
        value = getattr(spec, f.name)
        lines.append(f"{f.name}={','.join(value) if isinstance(value, tuple) else value}")
    for split, n in counts.items():
        lines.append(f"{split}_count={n}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: PathLike) -> Tuple[SceneSpec, dict]:
    values, counts = {}, {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.endswith("_count"):
            counts[key[:-len("_count")]] = int(value)
            continue
        values[key] = value
    kw = {}
    for f in fields(SceneSpec):
        if f.name not in values:
            continue
        v = values.pop(f.name)
        kw[f.name] = v if f.name == "kinds" else (float(v) if f.name == "noise" else int(v))
    if values:
        raise ValueError(f"unknown manifest keys: {sorted(values)}")
    return SceneSpec(**kw), counts


def write_dataset(root: PathLike, spec: SceneSpec, counts: dict, with_targets: bool = True,
                  gamma: float = 2.0) -> None:
    """Write ``images/{split}/{i}.ppm`` and ``labels/{split}/{i}.pgm`` (plus
    boundary/direction caches) for consecutive scene indices per split."""
    from .boundary import make_boundary_targets

    root = Path(root)
    start = 0
    for split, n in counts.items():
        dirs = ["images", "labels"] + (["boundary", "direction"] if with_targets else [])
        for d in dirs:
            (root / d / split).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            s = generate_scene(spec, start + i)
            save_ppm(root / "images" / split / f"{i}.ppm", s.image)
            save_pgm(root / "labels" / split / f"{i}.pgm", s.labels)
            if with_targets:
                t = make_boundary_targets(s.labels, gamma)
                save_pgm(root / "boundary" / split / f"{i}.pgm", t.boundary)
                save_pgm(root / "direction" / split / f"{i}.pgm",
                         np.where(t.direction == NO_DIRECTION, 255, t.direction))
        start += n
    write_manifest(root / MANIFEST, spec, counts)


def load_split(root: PathLike, split: str) -> List[Sample]:
    root = Path(root)
    _, counts = read_manifest(root / MANIFEST)
    if split not in counts:
        raise KeyError(f"split {split!r} not in manifest")
    out = []
    for i in range(counts[split]):
        image = load_ppm(root / "images" / split / f"{i}.ppm")
        labels = load_pgm(root / "labels" / split / f"{i}.pgm")
        targets = None
        bpath = root / "boundary" / split / f"{i}.pgm"
        dpath = root / "direction" / split / f"{i}.pgm"
        if bpath.exists() and dpath.exists():
            boundary = load_pgm(bpath)
            raw = load_pgm(dpath).astype(np.int64)
            direction = np.where(raw == 255, NO_DIRECTION, raw)
            offsets = np.zeros(labels.shape + (2,), dtype=np.int64)
            on = boundary == 1
            offsets[on] = bin_to_offset(direction[on])
            targets = BoundaryTargets(boundary, direction, offsets)
        out.append(Sample(image, labels, targets))
    return out
