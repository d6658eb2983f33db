"""Generated image datasets with known labels, for smoke runs and tests."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import Dataset, ImageRecord, TaskSpec, write_manifest

# one distinct RGB colour per label; enough for the 11-label task
_PALETTE = np.array(
    [
        [0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9], [0.9, 0.9, 0.1],
        [0.9, 0.1, 0.9], [0.1, 0.9, 0.9], [0.9, 0.5, 0.1], [0.5, 0.1, 0.9],
        [0.1, 0.5, 0.5], [0.6, 0.6, 0.6], [0.3, 0.2, 0.1],
    ]
)


def _save(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.clip(arr * 255 + 0.5, 0, 255).astype(np.uint8)).save(path)


def write_single_label_images(
    out_dir: str | os.PathLike,
    spec: TaskSpec,
    counts: dict[str, int] | int = 10,
    size: int = 64,
    seed: int = 0,
    noise: float = 0.05,
) -> Path:
    """Images whose class is their dominant colour; returns the manifest path.

    Classes are linearly separable on mean channel intensity.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if isinstance(counts, int):
        counts = {label: counts for label in spec.labels}
    records = []
    for j, label in enumerate(spec.labels):
        for i in range(counts.get(label, 0)):
            img = _PALETTE[j] + rng.normal(0, noise, size=(size, size, 3))
            name = f"{label}_{i:03d}.png"
            _save(img, out / name)
            records.append(ImageRecord(str((out / name).absolute()), frozenset([label])))
    manifest = out / "manifest.csv"
    write_manifest(Dataset(spec, tuple(records), "train"), manifest)
    return manifest


def write_multi_label_images(
    out_dir: str | os.PathLike,
    spec: TaskSpec,
    n_images: int = 20,
    size: int = 64,
    seed: int = 0,
    max_labels: int = 3,
) -> Path:
    """Images made of vertical stripes, one colour per present label."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    k = spec.num_labels
    for i in range(n_images):
        n = int(rng.integers(1, max_labels + 1))
        chosen = sorted(rng.choice(k, size=min(n, k), replace=False).tolist())
        img = np.zeros((size, size, 3))
        bounds = np.linspace(0, size, len(chosen) + 1).astype(int)
        for c, (lo, hi) in zip(chosen, zip(bounds[:-1], bounds[1:])):
            img[:, lo:hi] = _PALETTE[c % len(_PALETTE)]
        img += rng.normal(0, 0.03, size=img.shape)
        name = f"img_{i:03d}.png"
        _save(img, out / name)
        records.append(ImageRecord(str((out / name).absolute()), frozenset(spec.labels[c] for c in chosen)))
    manifest = out / "manifest.csv"
    write_manifest(Dataset(spec, tuple(records), "train"), manifest)
    return manifest
