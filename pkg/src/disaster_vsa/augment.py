"""Geometric augmentation: crop, rotate, horizontal flip.

Images are ``float32`` arrays of shape ``(height, width, 3)`` with values in
``[0, 1]``. Augmented records only carry their transform chain; pixels are
produced when a batch is assembled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .manifest import Dataset, ImageRecord


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    crop_fraction: float = 0.8
    rotation_degrees: tuple[float, ...] = (-15.0, 15.0)
    horizontal_flip: bool = True
    copies_per_record: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation_degrees", tuple(float(a) for a in self.rotation_degrees))
        if not 0 < self.crop_fraction <= 1:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        for angle in self.rotation_degrees:
            if not -180 <= angle <= 180:
                raise ValueError(f"rotation angle {angle} outside [-180, 180]")
        if self.copies_per_record < 0:
            raise ValueError("copies_per_record must be >= 0")


@dataclass
class SkippedImage:
    image_path: str
    reason: str


@dataclass
class AugmentReport:
    dataset: Dataset
    skipped: list[SkippedImage] = field(default_factory=list)


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")


def load_image(path: str) -> np.ndarray:
    """Decode a JPEG/PNG file into an ``(H, W, 3)`` float array in [0, 1].

    Grayscale and palette images are converted to RGB.
    """
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr


def apply_flip(img: np.ndarray) -> np.ndarray:
    """Mirror left-right: column ``c`` moves to ``width - 1 - c``."""
    _check_image(img)
    return np.ascontiguousarray(img[:, ::-1, :])


def apply_rotation(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre, keeping the shape.

    Uncovered border pixels replicate the nearest edge. Multiples of 180
    degrees (and of 90 degrees on square images) are exact index
    permutations; other angles use bilinear interpolation.
    """
    _check_image(img)
    if not -180 <= degrees <= 180:
        raise ValueError(f"rotation angle {degrees} outside [-180, 180]")
    quarter = degrees / 90.0
    if quarter == round(quarter):
        k = int(round(quarter)) % 4
        if k == 0:
            return img.copy()
        if k == 2:
            return np.ascontiguousarray(img[::-1, ::-1, :])
        if img.shape[0] == img.shape[1]:
            return np.ascontiguousarray(np.rot90(img, k, axes=(0, 1)))
    out = ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_crop(img: np.ndarray, fraction: float, offset: tuple[float, float] = (0.5, 0.5)) -> np.ndarray:
    """Cut an axis-aligned window whose sides are ``fraction`` of the input.

    ``offset`` is ``(vertical, horizontal)`` in [0, 1]: ``(0, 0)`` is the
    top-left corner, ``(1, 1)`` the bottom-right one. Output sides are
    ``round(fraction * side)`` rounding halves up.
    """
    _check_image(img)
    if not 0 < fraction <= 1:
        raise ValueError(f"crop fraction must be in (0, 1], got {fraction}")
    oy, ox = offset
    if not (0 <= oy <= 1 and 0 <= ox <= 1):
        raise ValueError(f"crop offset must lie in [0, 1]^2, got {offset}")
    h, w = img.shape[:2]
    ch, cw = _half_up(fraction * h), _half_up(fraction * w)
    if ch < 1 or cw < 1:
        raise ValueError(f"crop of {fraction} on {h}x{w} is smaller than one pixel")
    top = _half_up(oy * (h - ch))
    left = _half_up(ox * (w - cw))
    return np.ascontiguousarray(img[top : top + ch, left : left + cw, :])


def apply_transforms(img: np.ndarray, chain: Sequence[tuple]) -> np.ndarray:
    """Replay a recorded transform chain such as ``(("crop", 0.8, 0.1, 0.9), ("flip",))``."""
    for step in chain:
        name = step[0]
        if name == "crop":
            img = apply_crop(img, step[1], (step[2], step[3]))
        elif name == "rotate":
            img = apply_rotation(img, step[1])
        elif name == "flip":
            img = apply_flip(img)
        else:
            raise ValueError(f"unknown transform {name!r}")
    return img


def sample_chain(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[tuple, ...]:
    chain: list[tuple] = []
    if cfg.crop_fraction < 1:
        oy, ox = rng.random(2)
        chain.append(("crop", cfg.crop_fraction, round(float(oy), 6), round(float(ox), 6)))
    if cfg.rotation_degrees:
        angle = cfg.rotation_degrees[int(rng.integers(len(cfg.rotation_degrees)))]
        chain.append(("rotate", angle))
    if cfg.horizontal_flip and rng.random() < 0.5:
        chain.append(("flip",))
    return tuple(chain)


def _probe(path: str) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return None


def augment_dataset(ds: Dataset, cfg: AugmentConfig, verify_images: bool = True) -> AugmentReport:
    """Append ``copies_per_record`` augmented variants of every input record.

    Transform chains are sampled from ``cfg.seed`` in record order, so a
    fixed seed always yields the same chains. Records whose image cannot be
    decoded get no variants and are listed in the report instead.
    """
    if ds.split != "train":
        raise ValueError(f"augmentation is only applied to the train split, got {ds.split!r}")
    if not cfg.enabled or cfg.copies_per_record == 0:
        return AugmentReport(ds)
    rng = np.random.default_rng(cfg.seed)
    bad: dict[str, str | None] = {}
    skipped: list[SkippedImage] = []
    variants: list[ImageRecord] = []
    for rec in ds.records:
        # draw chains before the probe so skips don't shift later records
        chains = [sample_chain(rng, cfg) for _ in range(cfg.copies_per_record)]
        if verify_images:
            if rec.image_path not in bad:
                bad[rec.image_path] = _probe(rec.image_path)
                if bad[rec.image_path] is not None:
                    skipped.append(SkippedImage(rec.image_path, bad[rec.image_path]))
            if bad[rec.image_path] is not None:
                continue
        for chain in chains:
            variants.append(replace(rec, origin="augmented", transforms=rec.transforms + chain))
    return AugmentReport(ds.with_records(ds.records + tuple(variants)), skipped)
