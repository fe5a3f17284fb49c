"""Image/mask discovery, decoding, resizing and train/test splitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .ops import DTYPE, bilinear_resize

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# Conventional folder names of the public releases, tried before the generic
# images/ + masks/ pair. The mask stem suffix is stripped before pairing.
LAYOUTS = {
    "generic": (["images"], ["masks"], ""),
    "cvc": (["Original", "images"], ["Ground Truth", "GroundTruth", "masks"], ""),
    "skin": (
        ["ISIC2018_Task1-2_Training_Input", "images"],
        ["ISIC2018_Task1_Training_GroundTruth", "masks"],
        "_segmentation",
    ),
    "luna": (["2d_images", "images"], ["2d_masks", "masks"], ""),
}


class DataError(Exception):
    """Raised for missing, unreadable or malformed dataset inputs."""


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    original_size: tuple[int, int]  # (h, w)
    split: str = "unassigned"


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    layout: str = "generic"
    target_size: Optional[tuple[int, int]] = None  # (h, w); None keeps native size
    split_fraction: float = 0.8
    split_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; choose from {sorted(LAYOUTS)}")
        if self.target_size is not None:
            h, w = self.target_size
            if h < 8 or w < 8 or h % 8 or w % 8:
                raise ValueError(f"target size {h}x{w} (HxW) must be positive multiples of 8")
        if not 0 < self.split_fraction < 1:
            raise ValueError(f"split fraction must be in (0, 1), got {self.split_fraction}")


def _pick_dir(root: Path, names) -> Path:
    for name in names:
        if (root / name).is_dir():
            return root / name
    raise DataError(f"{root}: none of the expected folders exist: {', '.join(names)}")


def _by_stem(folder: Path, strip: str = "") -> dict[str, Path]:
    files = {}
    for f in sorted(folder.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES or not f.is_file():
            continue
        stem = f.stem
        if strip and stem.endswith(strip):
            stem = stem[: -len(strip)]
        files.setdefault(stem, f)
    return files


def index_dataset(spec: DatasetSpec) -> list[SampleRecord]:
    """Pair images with masks by shared filename stem, sorted by stem."""
    if not spec.root.is_dir():
        raise DataError(f"dataset root does not exist: {spec.root}")
    image_dirs, mask_dirs, strip = LAYOUTS[spec.layout]
    images = _by_stem(_pick_dir(spec.root, image_dirs))
    masks = _by_stem(_pick_dir(spec.root, mask_dirs), strip)
    unpaired = sorted(set(images) ^ set(masks))
    for stem in unpaired:
        side = "image" if stem in images else "mask"
        log.warning("excluding %s without partner: %s", side, (images.get(stem) or masks.get(stem)))
    records = []
    for stem in sorted(set(images) & set(masks)):
        with Image.open(images[stem]) as im:
            w, h = im.size
        records.append(SampleRecord(images[stem], masks[stem], (h, w)))
    if not records:
        raise DataError(f"{spec.root}: no image/mask pairs found")
    return records


def split_dataset(records, fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle, then the first ``floor(fraction * N)`` records train."""
    n = len(records)
    n_train = int(np.floor(fraction * n))
    if n_train < 1 or n - n_train < 1:
        raise DataError(f"cannot split {n} records with fraction {fraction}: each side needs at least one")
    order = np.random.default_rng(seed).permutation(n)
    train = [_with_split(records[i], "train") for i in sorted(order[:n_train])]
    test = [_with_split(records[i], "test") for i in sorted(order[n_train:])]
    return train, test


def _with_split(rec: SampleRecord, split: str) -> SampleRecord:
    return SampleRecord(rec.image_path, rec.mask_path, rec.original_size, split)


def binarize_mask(mask: np.ndarray, threshold: int = 128) -> np.ndarray:
    return (mask >= threshold).astype(np.int64)


def load_image(path, target_size=None) -> np.ndarray:
    """Decode to a (3, h, w) float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=DTYPE) / DTYPE(255)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    chw = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if target_size is not None and tuple(target_size) != chw.shape[1:]:
        chw = bilinear_resize(chw[None], *target_size)[0]
    return chw


def load_mask(path, target_size=None) -> np.ndarray:
    """Decode to an (h, w) int64 label map with classes {0, 1}."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if target_size is not None and (im.size[1], im.size[0]) != tuple(target_size):
                im = im.resize((target_size[1], target_size[0]), Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    labels = binarize_mask(arr)
    assert set(np.unique(labels)) <= {0, 1}
    return labels


def load_sample(record: SampleRecord, spec: DatasetSpec):
    image = load_image(record.image_path, spec.target_size)
    mask = load_mask(record.mask_path, spec.target_size)
    if image.shape[1:] != mask.shape:
        raise DataError(
            f"image {record.image_path} is {image.shape[1:]} but mask {record.mask_path} is {mask.shape}"
        )
    h, w = mask.shape
    if h % 8 or w % 8:
        raise DataError(
            f"{record.image_path}: size {h}x{w} (HxW) is not divisible by 8; set a target size such as "
            f"{max(8, round(h / 8) * 8)}x{max(8, round(w / 8) * 8)}"
        )
    return image, mask


def load_split(spec: DatasetSpec):
    """Index, split, and decode; returns ``(train, test)`` lists of
    ``(record, image, mask)`` triples."""
    records = index_dataset(spec)
    train, test = split_dataset(records, spec.split_fraction, spec.split_seed)
    return (
        [(r, *load_sample(r, spec)) for r in train],
        [(r, *load_sample(r, spec)) for r in test],
    )


def make_synthetic(n: int = 4, size: int = 64, seed: int = 0):
    """Generate ``n`` RGB images with one filled rectangle each as foreground.

    Returns a list of ``(image (3, size, size) float32, mask (size, size) int64)``.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        h0, w0 = rng.integers(size // 8, size // 3, 2)
        hh, ww = rng.integers(size // 4, size // 2, 2)
        mask = np.zeros((size, size), np.int64)
        mask[h0 : h0 + hh, w0 : w0 + ww] = 1
        bg = rng.uniform(0.0, 0.4, 3).astype(DTYPE)
        fg = rng.uniform(0.6, 1.0, 3).astype(DTYPE)
        img = np.where(mask[None] == 1, fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0, 0.05, img.shape)
        samples.append((np.clip(img, 0, 1).astype(DTYPE), mask))
    return samples


def write_synthetic(root, n: int = 4, size: int = 64, seed: int = 0) -> Path:
    """Write :func:`make_synthetic` output as PNGs in the generic layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(make_synthetic(n, size, seed)):
        rgb = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / "images" / f"{i:03d}.png")
        Image.fromarray((mask * 255).astype(np.uint8)).save(root / "masks" / f"{i:03d}.png")
    return root
