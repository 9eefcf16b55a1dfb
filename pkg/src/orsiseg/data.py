"""Image/mask pair datasets, paired augmentation and a synthetic shape generator.

On-disk layout::

    <root>/<split>/images/<id>.png|jpg
    <root>/<split>/masks/<id>.png

``load_dataset`` also accepts a split directory directly (one that holds
``images/`` and ``masks/``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "test")


class DataError(Exception):
    """Missing directories, unpaired or undecodable files, empty sources."""


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    id: str


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    split: str = "train"
    size: tuple = (352, 352)
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "size", tuple(self.size))
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        if any(s % 32 for s in self.size):
            raise DataError(f"resize target {self.size} not divisible by 32")


def read_image(path, size=None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def read_gray(path) -> np.ndarray:
    """Grayscale file as float64 in [0, 1], shape (H, W)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr


def binarize(gray: np.ndarray) -> np.ndarray:
    return (gray > 0.5).astype(np.float32)


def read_mask(path, size=None) -> np.ndarray:
    mask = binarize(read_gray(path))
    if size is not None and mask.shape != tuple(size):
        im = Image.fromarray((mask * 255).astype(np.uint8)).resize((size[1], size[0]), Image.NEAREST)
        mask = binarize(np.asarray(im, dtype=np.float64) / 255.0)
    return mask[None]


def resolve_split_dir(root, split) -> Path:
    root = Path(root)
    if (root / split / "images").is_dir() or (root / split).is_dir():
        return root / split
    return root


def pair_files(split_dir: Path) -> list[tuple[str, Path, Path]]:
    img_dir, mask_dir = split_dir / "images", split_dir / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"missing directory: {d}")
    images = {p.stem: p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS}
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
    orphans = sorted(
        [str(images[k]) for k in images.keys() - masks.keys()]
        + [str(masks[k]) for k in masks.keys() - images.keys()]
    )
    if orphans:
        raise DataError("unpaired files: " + ", ".join(orphans))
    return [(k, images[k], masks[k]) for k in sorted(images)]


class SegmentationDataset(Sequence):
    """Lazily decoded, lexicographically ordered image/mask pairs."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.split_dir = resolve_split_dir(spec.root, spec.split)
        self.pairs = pair_files(self.split_dir)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, idx) -> Sample:
        key, img_path, mask_path = self.pairs[idx]
        image = read_image(img_path, self.spec.size)
        mask = read_mask(mask_path, self.spec.size)
        return Sample(image, mask, key)

    @property
    def ids(self):
        return [p[0] for p in self.pairs]


def load_dataset(spec: DatasetSpec) -> SegmentationDataset:
    return SegmentationDataset(spec)


def apply_transform(sample: Sample, flip: bool, quarter_turns: int) -> Sample:
    image, mask = sample.image, sample.mask
    if flip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if quarter_turns % 4:
        image = np.rot90(image, quarter_turns, axes=(1, 2))
        mask = np.rot90(mask, quarter_turns, axes=(1, 2))
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Joint horizontal flip (p = 1/2) and a uniform multiple of 90 degrees rotation."""
    flip = bool(rng.random() < 0.5)
    turns = int(rng.integers(4))
    return apply_transform(sample, flip, turns)


def batch_iter(
    source: Sequence[Sample], batch_size: int, shuffle: bool = False, seed=None, transform=None
) -> Iterator[tuple[torch.Tensor, torch.Tensor, list[str]]]:
    """Yield ``(images, masks, ids)``; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(source)
    if n == 0:
        raise DataError("empty sample source")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        batch = [source[int(i)] for i in order[start:start + batch_size]]
        if transform is not None:
            batch = [transform(s) for s in batch]
        images = torch.from_numpy(np.stack([s.image for s in batch]))
        masks = torch.from_numpy(np.stack([s.mask for s in batch]))
        yield images, masks, [s.id for s in batch]


# synthetic data -----------------------------------------------------------


def rasterize_shape(shape: dict, size: int) -> np.ndarray:
    """Boolean (size, size) mask of one shape, sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - shape["cx"], yy - shape["cy"]
    if shape["kind"] == "ellipse":
        c, s = np.cos(shape["angle"]), np.sin(shape["angle"])
        u = (dx * c + dy * s) / shape["a"]
        v = (-dx * s + dy * c) / shape["b"]
        return u * u + v * v <= 1.0
    return (np.abs(dx) <= shape["a"]) & (np.abs(dy) <= shape["b"])


def _texture(rng, size, lo, hi):
    coarse = rng.random((3, size // 8, size // 8))
    smooth = ndimage.zoom(coarse, (1, 8, 8), order=1)
    fine = rng.normal(0.0, 0.04, (3, size, size))
    return np.clip(lo + (hi - lo) * smooth + fine, 0.0, 1.0)


def _random_shape(rng, size):
    kind = "ellipse" if rng.random() < 0.5 else "rect"
    return {
        "kind": kind,
        "cx": float(rng.uniform(0.25, 0.75) * size),
        "cy": float(rng.uniform(0.25, 0.75) * size),
        "a": float(rng.uniform(0.08, 0.2) * size),
        "b": float(rng.uniform(0.08, 0.2) * size),
        "angle": float(rng.uniform(0, np.pi)) if kind == "ellipse" else 0.0,
        "color": [float(c) for c in rng.uniform(0.65, 1.0, 3)],
    }


def synth_dataset(out_dir, n: int, size: int, seed: int, split: str = "train") -> Path:
    """Write ``n`` textured images with 1-3 ellipses/rectangles and exact masks.

    Shapes lie fully inside the frame with half-extents >= 8% of the side, so
    every mask covers at least 1% of the pixels. Shape parameters go to
    ``<out_dir>/manifest.json``.
    """
    if size % 32:
        raise DataError(f"size {size} not divisible by 32")
    if n < 1:
        raise DataError("n must be >= 1")
    out_dir = Path(out_dir)
    img_dir, mask_dir = out_dir / split / "images", out_dir / split / "masks"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        sid = f"synth_{i:04d}"
        image = _texture(rng, size, 0.05, 0.45)
        mask = np.zeros((size, size), dtype=bool)
        shapes = [_random_shape(rng, size) for _ in range(int(rng.integers(1, 4)))]
        for shape in shapes:
            region = rasterize_shape(shape, size)
            fill = np.asarray(shape["color"])[:, None, None] + rng.normal(0.0, 0.03, (3, size, size))
            image = np.where(region[None], np.clip(fill, 0.0, 1.0), image)
            mask |= region
        Image.fromarray(np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8)).save(img_dir / f"{sid}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(mask_dir / f"{sid}.png")
        records.append({"id": sid, "split": split, "shapes": shapes})
    manifest = {"n": n, "size": size, "seed": seed, "samples": records}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir
