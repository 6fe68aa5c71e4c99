"""Synthetic "shapes world" segmentation data and SGT1 dataset I/O.

Every random number comes from one splitmix64 stream seeded by the caller,
consumed in this order for each image ``i = 0 .. N-1``:

1. ``k = 1 + floor(3u)`` shapes requested.
2. For each requested shape, up to ``MAX_TRIES`` placement attempts, each
   drawing five uniforms: class ``1 + floor(3u)``, radius ``r``, second
   radius ``r2`` (rectangle half-width; drawn but unused for other classes),
   centre row, centre column. Radii are ``rmin + floor(u (rmax - rmin + 1))``
   with ``rmax = min(H, W) // 4`` and ``rmin = max(2, min(H, W) // 10)``.
   Centres keep the shape inside the image. An attempt is rejected if it
   overlaps an earlier shape or would push foreground above
   ``MAX_FOREGROUND`` of the image. When all tries fail, no further shapes
   are placed in that image.
3. ``3 H W`` uniforms, in (channel, row, column) order, for pixel noise.

Pixel value = base colour of the pixel's class + ``NOISE (2u - 1)``, clamped
to [0, 1]. Labels: 0 background, 1 rectangle, 2 disk (dx^2 + dy^2 <= r^2),
3 diamond (|dx| + |dy| <= r).
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import sgt
from .errors import ValidationError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

NUM_CLASSES = 4
BACKGROUND_COLOR = (0.5, 0.5, 0.5)
# Low contrast on purpose: each class sits 0.08 above grey in one channel and
# 0.06 below in the other two, so single pixels are ambiguous under the noise
# and the network has to pool context. An 8/255 l-inf perturbation is then
# comparable to the class separation.
CLASS_COLORS = {
    1: (0.58, 0.44, 0.44),
    2: (0.44, 0.58, 0.44),
    3: (0.44, 0.44, 0.58),
}
NOISE = 0.1
MAX_TRIES = 64
MAX_FOREGROUND = 0.5
MIN_EXTENT = 16


class Prng:
    """splitmix64 generator.

    >>> Prng(1234567).next()
    6457827717110365317
    """

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next(self):
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self):
        """Double in [0, 1) from the top 53 bits."""
        return (self.next() >> 11) * 2.0 ** -53

    def below(self, n):
        """Integer in [0, n) as ``floor(n * uniform())``."""
        return int(n * self.uniform())

    def next_block(self, count):
        """The next ``count`` raw outputs as a uint64 array (same sequence as ``next``)."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        self.state = (self.state + count * GOLDEN) & MASK64
        return z ^ (z >> np.uint64(31))

    def uniform_block(self, count):
        return (self.next_block(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


@dataclass(frozen=True)
class Shape:
    cls: int
    cy: int
    cx: int
    ry: int
    rx: int

    def contains(self, y, x):
        dy, dx = np.abs(y - self.cy), np.abs(x - self.cx)
        if self.cls == 1:
            return (dy <= self.ry) & (dx <= self.rx)
        if self.cls == 2:
            return dy * dy + dx * dx <= self.ry * self.ry
        return dy + dx <= self.ry

    def raster(self, h, w):
        yy, xx = np.mgrid[0:h, 0:w]
        return self.contains(yy, xx)


@dataclass
class Dataset:
    images: np.ndarray          # (N, 3, H, W) float64 in [0, 1]
    labels: np.ndarray          # (N, H, W) uint32
    seed: int | None = None
    split: str = "train"
    num_classes: int = NUM_CLASSES
    shapes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValidationError(f"images must be (N,3,H,W), got {list(self.images.shape)}")
        n, _, h, w = self.images.shape
        if self.labels.shape != (n, h, w):
            raise ValidationError(
                f"labels dims {list(self.labels.shape)} do not match images [{n}, {h}, {w}]"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def hw(self):
        return self.images.shape[2:]

    def batches(self, size, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), size):
            idx = order[start:start + size]
            yield self.images[idx], self.labels[idx]


def _radius_bounds(h, w):
    side = min(h, w)
    return max(2, side // 10), side // 4


def _place_shapes(rng, h, w):
    rmin, rmax = _radius_bounds(h, w)
    span = rmax - rmin + 1
    occupied = np.zeros((h, w), dtype=bool)
    budget = MAX_FOREGROUND * h * w
    shapes = []
    for _ in range(1 + rng.below(3)):
        for _ in range(MAX_TRIES):
            cls = 1 + rng.below(3)
            r = rmin + rng.below(span)
            r2 = rmin + rng.below(span)
            rx = r2 if cls == 1 else r
            cy = r + rng.below(h - 2 * r)
            cx = rx + rng.below(w - 2 * rx)
            shape = Shape(cls, cy, cx, r, rx)
            cells = shape.raster(h, w)
            if not (cells & occupied).any() and occupied.sum() + cells.sum() <= budget:
                occupied |= cells
                shapes.append(shape)
                break
        else:
            break
    return shapes


def render_labels(shapes, h, w):
    labels = np.zeros((h, w), dtype=np.uint32)
    for shape in shapes:
        labels[shape.raster(h, w)] = shape.cls
    return labels


def generate(seed, n, h, w, num_classes=NUM_CLASSES, split="train"):
    """Generate ``n`` noisy shape images with their label maps."""
    if num_classes != NUM_CLASSES:
        raise ValidationError(f"the shapes world has exactly {NUM_CLASSES} classes, got {num_classes}")
    if h < MIN_EXTENT or w < MIN_EXTENT:
        raise ValidationError(f"H and W must be at least {MIN_EXTENT}, got {h}x{w}")
    if n < 0:
        raise ValidationError("N must be non-negative")
    rng = Prng(seed)
    palette = np.array([BACKGROUND_COLOR] + [CLASS_COLORS[c] for c in (1, 2, 3)])
    images = np.empty((n, 3, h, w))
    labels = np.empty((n, h, w), dtype=np.uint32)
    all_shapes = []
    for i in range(n):
        shapes = _place_shapes(rng, h, w)
        labels[i] = render_labels(shapes, h, w)
        noise = rng.uniform_block(3 * h * w).reshape(3, h, w)
        base = palette[labels[i]].transpose(2, 0, 1)
        images[i] = np.clip(base + NOISE * (2.0 * noise - 1.0), 0.0, 1.0)
        all_shapes.append(shapes)
    return Dataset(images, labels, seed=seed, split=split, shapes=all_shapes)


def validate_pair(images, labels, num_classes=NUM_CLASSES, images_name="images", labels_name="labels"):
    if images.dtype != np.float64:
        raise ValidationError(f"{images_name}: dtype must be float64, got {images.dtype}")
    if labels.dtype != np.uint32:
        raise ValidationError(f"{labels_name}: dtype must be uint32, got {labels.dtype}")
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValidationError(f"{images_name}: dims must be [N, 3, H, W], got {list(images.shape)}")
    n, _, h, w = images.shape
    if labels.shape != (n, h, w):
        raise ValidationError(
            f"{labels_name}: dims {list(labels.shape)} do not match {images_name} [N, H, W] = [{n}, {h}, {w}]"
        )
    bad = ~np.isfinite(images) | (images < 0.0) | (images > 1.0)
    if bad.any():
        index = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValidationError(
            f"{images_name}: value {images[index]!r} at pixel index {list(index)} outside range [0, 1]"
        )
    if labels.size and labels.max() >= num_classes:
        index = tuple(int(v) for v in np.argwhere(labels >= num_classes)[0])
        raise ValidationError(
            f"{labels_name}: class {labels[index]} at index {list(index)} exceeds max legal class {num_classes - 1}"
        )


def load_pair(images_path, labels_path, num_classes=NUM_CLASSES, split="train", seed=None):
    """Read and validate an externally supplied (images, labels) SGT1 pair."""
    images, labels = sgt.load(images_path), sgt.load(labels_path)
    validate_pair(images, labels, num_classes, str(images_path), str(labels_path))
    return Dataset(images, labels, seed=seed, split=split, num_classes=num_classes)


IMAGES_FILE = "images.sgt"
LABELS_FILE = "labels.sgt"
MANIFEST_FILE = "manifest.txt"


def save(dataset, directory):
    """Write images.sgt, labels.sgt and a key=value manifest into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    sgt.save(os.path.join(directory, IMAGES_FILE), dataset.images)
    sgt.save(os.path.join(directory, LABELS_FILE), dataset.labels)
    n, _, h, w = dataset.images.shape
    manifest = {
        "seed": "" if dataset.seed is None else dataset.seed,
        "N": n, "H": h, "W": w, "C": dataset.num_classes,
        "split": dataset.split,
        "images": IMAGES_FILE, "labels": LABELS_FILE,
    }
    with open(os.path.join(directory, MANIFEST_FILE), "w", newline="\n") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in manifest.items())


def read_manifest(path):
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                entries[key.strip()] = value.strip()
    return entries


def load_dir(directory):
    """Load a dataset directory written by ``save``."""
    manifest = read_manifest(os.path.join(directory, MANIFEST_FILE))
    seed = int(manifest["seed"]) if manifest.get("seed") else None
    return load_pair(
        os.path.join(directory, manifest.get("images", IMAGES_FILE)),
        os.path.join(directory, manifest.get("labels", LABELS_FILE)),
        num_classes=int(manifest.get("C", NUM_CLASSES)),
        split=manifest.get("split", "train"),
        seed=seed,
    )
