"""Synthetic desk-scale image sets: flat noisy backgrounds with a few solid shapes.

Large homogeneous regions give the merge policy redundant patches to find,
while the shapes keep images distinguishable.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .num.rng import Rng


def synth_image(rng: Rng, size: int = 16, channels: int = 3) -> np.ndarray:
    bg = rng.uniform((channels, 1, 1))
    img = np.broadcast_to(bg, (channels, size, size)).copy()
    img += rng.normal((channels, size, size), std=0.02)
    n_shapes = 1 + int(rng.integers(1, 2)[0])
    for _ in range(n_shapes):
        h, w = (2 + rng.integers(2, size // 2)).tolist()
        y, x = rng.integers(1, size - h + 1)[0], rng.integers(1, size - w + 1)[0]
        img[:, y:y + h, x:x + w] = rng.uniform((channels, 1, 1))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_images(n: int, size: int = 16, seed: int = 0, channels: int = 3) -> list[np.ndarray]:
    root = Rng(seed, 0x64617461)
    return [synth_image(root.split(i), size, channels) for i in range(n)]


def write_dataset(directory, images, prefix: str = "img") -> list[Path]:
    from .io.ppm import write_ppm

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = directory / f"{prefix}{i:05d}.ppm"
        write_ppm(path, img)
        paths.append(path)
    return paths


def load_dataset(directory) -> list[tuple[str, np.ndarray]]:
    """All ``*.ppm`` files of a flat directory, in alphabetical order."""
    from .io.ppm import read_ppm

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    return [(p.name, read_ppm(p)) for p in sorted(directory.glob("*.ppm"))]
