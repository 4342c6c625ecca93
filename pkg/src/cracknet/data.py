"""Dataset ingestion, tiling, fold splits, batching and synthetic cracks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, DataError

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
NOISE_KINDS = ("none", "shadow", "blotch")
MIN_CRACK_FRACTION = 0.002
MAX_CRACK_FRACTION = 0.08


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ContractError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ContractError(f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractError(f"{self.id}: mask is not binary")


def _list_images(directory):
    return {p.stem: p for p in sorted(Path(directory).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def load_dataset(images_dir, masks_dir):
    """Load ``images/<id>.<ext>`` with ``masks/<id>.<ext>`` pairs, sorted by id.

    Mask pixels above 127 are cracks. All problems are collected and raised
    together as one :class:`DataError`.
    """
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}", [f"{d}: missing directory"])
    images, masks = _list_images(images_dir), _list_images(masks_dir)
    samples, problems = [], []
    for stem in sorted(images):
        if stem not in masks:
            problems.append(f"{stem}: no mask file in {masks_dir}")
            continue
        try:
            image, mask = read_image(images[stem]), read_mask(masks[stem])
        except OSError as exc:
            problems.append(f"{stem}: unreadable ({exc})")
            continue
        if image.shape[:2] != mask.shape:
            problems.append(f"{stem}: image {image.shape[1]}x{image.shape[0]} but mask {mask.shape[1]}x{mask.shape[0]}")
            continue
        samples.append(SegmentationSample(stem, image, mask))
    if problems:
        raise DataError(f"{len(problems)} problem(s) loading dataset", problems)
    return samples


def image_to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def encode_png(array):
    """PNG bytes of an 8-bit RGB or grayscale array (deterministic, no metadata)."""
    import io

    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def save_sample(sample, images_dir, masks_dir, write=None):
    """Write a sample as ``<id>.png`` in both directories.

    ``write(path, data)`` may be supplied to control how bytes reach disk.
    """
    write = write or (lambda path, data: Path(path).write_bytes(data))
    write(Path(images_dir) / f"{sample.id}.png", encode_png(image_to_uint8(sample.image)))
    write(Path(masks_dir) / f"{sample.id}.png", encode_png((sample.mask * 255).astype(np.uint8)))


# -- tiling ------------------------------------------------------------

def tile_starts(extent, tile, stride):
    """Regular starts, plus one anchored at the far edge if the grid falls short."""
    if tile > extent:
        raise ContractError(f"tile {tile} is larger than extent {extent}")
    if stride < 1:
        raise ContractError("stride must be positive")
    starts = list(range(0, extent - tile + 1, stride))
    if starts[-1] + tile < extent:
        starts.append(extent - tile)
    return starts


def tile_crop(image, mask, tile=224, stride=224, base_id="tile"):
    """Cut ``tile x tile`` crops covering the whole image."""
    h, w = mask.shape
    out = []
    for y in tile_starts(h, tile, stride):
        for x in tile_starts(w, tile, stride):
            out.append(SegmentationSample(f"{base_id}_y{y:05d}_x{x:05d}",
                                          image[y:y + tile, x:x + tile].copy(), mask[y:y + tile, x:x + tile].copy()))
    return out


# -- splits and batches ------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple
    val_ids: tuple
    seed: int


def _ids(dataset):
    return [s.id if isinstance(s, SegmentationSample) else str(s) for s in dataset]


def split_folds(dataset, ratio=0.8, fold=1, seed=0):
    """Seeded train/validation split.

    Fold 1 trains on the first ``floor(ratio * n)`` ids of a seeded shuffle and
    validates on the rest. Fold 2 swaps in the equally sized block just before
    that, so the two validation sets are disjoint.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must lie in (0, 1), got {ratio}")
    if fold not in (1, 2):
        raise ConfigError(f"fold must be 1 or 2, got {fold}")
    ids = sorted(_ids(dataset))
    if not ids:
        raise ContractError("cannot split an empty dataset")
    n = len(ids)
    n_train = math.floor(round(ratio * n, 9))
    n_val = n - n_train
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    if fold == 1:
        val = perm[n_train:]
    else:
        if n_val > n_train:
            raise ConfigError(f"a second disjoint validation block of {n_val} ids does not fit in {n} samples")
        val = perm[n_train - n_val:n_train]
    chosen = set(val)
    train = [i for i in perm if i not in chosen]
    return FoldSplit(fold, tuple(train), tuple(val), seed)


def batches(ids, batch_size=12, seed=0, epoch=0):
    """Per-epoch shuffled batches keyed by ``(seed, epoch)``; the short last batch is kept."""
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    ids = list(ids)
    order = np.random.default_rng([seed, epoch]).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


# -- synthetic cracks --------------------------------------------------

def _segment_distance(px, py, a, b):
    dx, dy = b[0] - a[0], b[1] - a[1]
    length2 = dx * dx + dy * dy
    if length2 == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / length2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))


def _random_walk(rng, size):
    steps = int(rng.integers(4, 9))
    step = size / 10.0
    x, y = rng.uniform(0.15 * size, 0.85 * size, 2)
    angle = rng.uniform(0, 2 * np.pi)
    pts = [(x, y)]
    for _ in range(steps):
        angle += rng.normal(0.0, 0.4)
        x, y = x + step * np.cos(angle), y + step * np.sin(angle)
        pts.append((x, y))
    return pts


def _crack_layer(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.integers(1, 5))
        pts = _random_walk(rng, size)
        dist = np.full((size, size), np.inf)
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(xx, yy, a, b))
        mask |= dist <= width / 2.0
    return mask


def _background(rng, size):
    base = rng.uniform(0.45, 0.7)
    texture = gaussian_filter(rng.standard_normal((size, size)), 1.5) * 0.15
    grain = rng.standard_normal((size, size)) * 0.02
    tint = rng.uniform(-0.02, 0.02, 3)
    return base + (texture + grain)[:, :, None] + tint


def _shadow(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    edge = rng.uniform(-0.2, 0.2)
    return 1.0 - rng.uniform(0.25, 0.45) / (1.0 + np.exp(-(ramp - edge) * 12.0))


def _blotches(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    shade = np.ones((size, size))
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(size / 10, size / 5, 2)
        r2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        shade *= 1.0 - rng.uniform(0.1, 0.25) * np.exp(-r2 * 2.0)
    return shade


def synth_sample(index, size, seed=0, noise="none"):
    """One synthetic pavement tile, deterministic in ``(seed, index)``.

    Cracks are 1-3 random-walk polylines of width 1-4 drawn dark on a
    textured gray background. The mask is exactly the drawn crack pixels;
    shadow and blotch distractors only touch the image. Draws whose crack
    fraction falls outside [0.2%, 8%] are rejected and redrawn.
    """
    if size < 32:
        raise ContractError(f"synthetic tiles need size >= 32, got {size}")
    if noise not in NOISE_KINDS:
        raise ConfigError(f"unknown noise {noise!r}; expected one of {', '.join(NOISE_KINDS)}")
    rng = np.random.default_rng([seed, index])
    while True:
        mask = _crack_layer(rng, size)
        if MIN_CRACK_FRACTION <= mask.mean() <= MAX_CRACK_FRACTION:
            break
    image = _background(rng, size)
    depth = rng.uniform(0.25, 0.4)
    image = image - (mask * depth * rng.uniform(0.8, 1.0, (size, size)))[:, :, None]
    if noise == "shadow":
        image = image * _shadow(rng, size)[:, :, None]
    elif noise == "blotch":
        image = image * _blotches(rng, size)[:, :, None]
    image = image_to_uint8(image).astype(np.float32) / 255.0
    return SegmentationSample(f"s{index:05d}", image, mask.astype(np.uint8))


def synth_cracks(n, size=64, seed=0, noise="none"):
    return [synth_sample(i, size, seed, noise) for i in range(n)]
