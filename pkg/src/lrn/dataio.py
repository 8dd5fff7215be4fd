"""Synthetic shape dataset, netpbm codecs, and class statistics."""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CodecError, DataError
from .tensor_ops import IGNORE

NOISE_SIGMA = 0.05

_BASE_COLORS = [
    (0.85, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.20, 0.30, 0.85),
    (0.85, 0.80, 0.20),
    (0.80, 0.25, 0.80),
    (0.20, 0.80, 0.80),
    (0.85, 0.55, 0.20),
    (0.50, 0.20, 0.75),
]


def class_color(c):
    """Base RGB color of shape class ``c`` (c >= 1)."""
    if c < 1:
        raise ValueError("class 0 is the textured background and has no base color")
    if c <= len(_BASE_COLORS):
        return np.array(_BASE_COLORS[c - 1])
    hue = (c * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))


@dataclass(frozen=True)
class GenConfig:
    size: int = 64
    num_classes: int = 5
    min_shapes: int = 1
    max_shapes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.size <= 0 or self.size % 32:
            raise DataError(f"image size must be a positive multiple of 32, got {self.size}")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2 (background plus one shape class)")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise DataError("need 0 <= min_shapes <= max_shapes")


def _shape_mask(rng, kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5
    xx = xx + 0.5
    lo, hi = h / 8, h / 3
    if kind == "rect":
        rh, rw = rng.uniform(lo, hi, size=2)
        y0 = rng.uniform(0, h - rh)
        x0 = rng.uniform(0, w - rw)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    if kind == "circle":
        r = rng.uniform(lo, hi) / 2
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # triangle: three vertices around a random center
    s = rng.uniform(lo, hi)
    cy, cx = rng.uniform(s / 2, h - s / 2), rng.uniform(s / 2, w - s / 2)
    ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
    py, px = cy + s * np.sin(ang) * 0.75, cx + s * np.cos(ang) * 0.75
    inside = np.ones((h, w), dtype=bool)
    sign = None
    for i in range(3):
        j = (i + 1) % 3
        cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
        if sign is None:
            sign = np.sign((px[j] - px[i]) * (py[(i + 2) % 3] - py[i])
                           - (py[j] - py[i]) * (px[(i + 2) % 3] - px[i]))
        inside &= cross * sign >= 0
    return inside


def generate_sample(rng, cfg: GenConfig):
    """Render one (image, labels) pair.

    ``image`` is float32 (3, h, w) in [0, 1]; ``labels`` is uint8 (h, w) with
    the topmost shape's class per pixel and 0 for background.
    """
    h = w = cfg.size
    yy, xx = np.mgrid[0:h, 0:w] / float(h)
    gray = rng.uniform(0.35, 0.6)
    fy, fx = rng.uniform(1, 4, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.08 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    tint = rng.uniform(-0.04, 0.04, size=3)
    image = gray + texture[None] + tint[:, None, None]
    image = image + rng.normal(0, NOISE_SIGMA, size=(3, h, w))
    labels = np.zeros((h, w), dtype=np.uint8)

    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        c = int(rng.integers(1, cfg.num_classes))
        kind = ("rect", "circle", "triangle")[int(rng.integers(0, 3))]
        mask = _shape_mask(rng, kind, h, w)
        noise = rng.normal(0, NOISE_SIGMA, size=(3, h, w))
        image = np.where(mask[None], class_color(c)[:, None, None] + noise, image)
        labels[mask] = c
    return np.clip(image, 0, 1).astype(np.float32), labels


# ---------------------------------------------------------------- netpbm codecs

def _header(data: bytes, magic: bytes, fields: int):
    """Parse magic plus ``fields`` integers; returns (values, raster offset)."""
    if len(data) < 2 or data[:2] != magic:
        raise CodecError(f"bad magic, expected {magic!r}", 0)
    pos = 2
    values = []
    while len(values) < fields:
        if pos >= len(data):
            raise CodecError("truncated header", pos)
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise CodecError("unterminated comment in header", pos)
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            values.append(int(data[start:pos]))
        else:
            raise CodecError(f"unexpected byte {ch!r} in header", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise CodecError("missing whitespace after header", pos)
    return values, pos + 1


def _raster(data, magic, channels):
    (w, h, maxval), off = _header(data, magic, 3)
    if w < 1 or h < 1:
        raise CodecError(f"invalid dimensions {w}x{h}", 2)
    if not 1 <= maxval <= 255:
        raise CodecError(f"unsupported maxval {maxval}", off - 1)
    need = w * h * channels
    if len(data) - off < need:
        raise CodecError(f"truncated raster: need {need} bytes, have {len(data) - off}", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    if raw.max(initial=0) > maxval:
        bad = int(np.argmax(raw > maxval))
        raise CodecError(f"sample value {raw[bad]} exceeds maxval {maxval}", off + bad)
    return raw, h, w, maxval


def quantize(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_ppm(image) -> bytes:
    """Encode a (3, h, w) float image in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a (3, h, w) image, got {image.shape}")
    _, h, w = image.shape
    q = quantize(image).transpose(1, 2, 0)
    return b"P6\n%d %d\n255\n" % (w, h) + q.tobytes()


def read_ppm(data: bytes):
    raw, h, w, maxval = _raster(data, b"P6", 3)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / np.float32(maxval))


def write_pgm_labels(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"expected a 2-D label map, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("label values must lie in 0..255")
    h, w = labels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes()


def read_pgm_labels(data: bytes):
    raw, h, w, _ = _raster(data, b"P5", 1)
    return raw.reshape(h, w).copy()


# ---------------------------------------------------------------- dataset on disk

@dataclass
class DatasetManifest:
    root: Path
    names: list
    num_classes: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.class_names:
            self.class_names = default_class_names(self.num_classes)

    def image_path(self, name):
        return self.root / "images" / f"{name}.ppm"

    def label_path(self, name):
        return self.root / "labels" / f"{name}.pgm"

    def __len__(self):
        return len(self.names)

    def load(self, i):
        name = self.names[i]
        image = read_file(self.image_path(name), read_ppm)
        labels = read_file(self.label_path(name), read_pgm_labels)
        if image.shape[1:] != labels.shape:
            raise DataError(f"{name}: image {image.shape[1:]} and labels {labels.shape} differ")
        return image, labels

    def load_labels(self, i):
        return read_file(self.label_path(self.names[i]), read_pgm_labels)


def default_class_names(num_classes):
    return ["background"] + [f"class{c}" for c in range(1, num_classes)]


def read_file(path, decode):
    path = Path(path)
    data = path.read_bytes()
    try:
        return decode(data)
    except CodecError as e:
        raise CodecError(f"{path}: {e}") from None


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_manifest(root, names, num_classes):
    root = Path(root)
    text = f"num_classes={num_classes}\n" + "".join(f"{n}\n" for n in names)
    _write_atomic(root / "manifest.txt", text.encode())


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.txt"
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("num_classes="):
        raise DataError(f"{path}: first line must be num_classes=<C>")
    try:
        num_classes = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise DataError(f"{path}: bad num_classes line {lines[0]!r}") from None
    names = [ln.strip() for ln in lines[1:] if ln.strip()]
    m = DatasetManifest(root, names, num_classes)
    for n in names:
        for p in (m.image_path(n), m.label_path(n)):
            if not p.is_file():
                raise DataError(f"{path}: missing file {p}")
    return m


def generate_dataset(out, count, cfg: GenConfig) -> DatasetManifest:
    """Write ``count`` samples under ``out``; sample i depends only on (seed, i)."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, i])
        image, labels = generate_sample(rng, cfg)
        name = f"{i:05d}"
        _write_atomic(out / "images" / f"{name}.ppm", write_ppm(image))
        _write_atomic(out / "labels" / f"{name}.pgm", write_pgm_labels(labels))
        names.append(name)
    write_manifest(out, names, cfg.num_classes)
    return DatasetManifest(out, names, cfg.num_classes)


# ---------------------------------------------------------------- statistics

def class_counts(label_maps, num_classes):
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_maps:
        labels = np.asarray(labels)
        valid = labels[labels != IGNORE].astype(np.int64)
        if valid.size and valid.max() >= num_classes:
            raise DataError(f"label {valid.max()} out of range for {num_classes} classes")
        counts += np.bincount(valid, minlength=num_classes)
    return counts


def class_frequencies(source, num_classes=None):
    """Fraction of non-ignored pixels per class.

    ``source`` is a DatasetManifest or an iterable of label maps (then
    ``num_classes`` is required).
    """
    if isinstance(source, DatasetManifest):
        num_classes = source.num_classes
        maps = (source.load_labels(i) for i in range(len(source)))
    else:
        maps = source
    counts = class_counts(maps, num_classes)
    total = counts.sum()
    if total == 0:
        raise DataError("no labelled pixels to count")
    return counts / total


def median_freq_weights(freq):
    """median(freq of present classes) / freq[c]; absent classes get weight 0."""
    freq = np.asarray(freq, dtype=np.float64)
    present = freq > 0
    if not present.any():
        raise DataError("all class frequencies are zero")
    med = np.median(freq[present])
    return np.where(present, med / np.where(present, freq, 1.0), 0.0)


def mean_pixel(manifest: DatasetManifest):
    """Per-channel mean of all dataset images (float32, shape (3,))."""
    if len(manifest) == 0:
        raise DataError("empty dataset")
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for i in range(len(manifest)):
        image, _ = manifest.load(i)
        total += image.astype(np.float64).sum(axis=(1, 2))
        count += image.shape[1] * image.shape[2]
    return (total / count).astype(np.float32)
