"""Grayscale image IO and a synthetic image generator for desk-scale runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .cs_ops import DataError

IMAGE_SUFFIXES = (".pgm", ".pnm", ".png")


def load_image(path: str | Path) -> np.ndarray:
    """8-bit luminance image as ``uint8 [H, W]``."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def save_pgm(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_directory(directory: str | Path) -> dict[str, np.ndarray]:
    paths = list_images(directory)
    if not paths:
        raise DataError(f"no PGM/PNG images in {directory}")
    return {p.name: load_image(p) for p in paths}


def synthetic_images(count: int, size: int = 99, seed: int = 0) -> dict[str, np.ndarray]:
    """Smooth random textures with a few hard edges, as ``uint8`` images.

    Band-limited noise at two scales plus random rectangles gives blocks with
    both flat regions and edges, which is enough to exercise training.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for k in range(count):
        coarse = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8, mode="wrap")
        fine = gaussian_filter(rng.standard_normal((size, size)), sigma=2.0, mode="wrap")
        img = coarse / (coarse.std() + 1e-12) + 0.3 * fine / (fine.std() + 1e-12)
        for _ in range(3):
            r0, c0 = rng.integers(0, size - 8, size=2)
            h, w = rng.integers(6, size // 2, size=2)
            img[r0 : r0 + h, c0 : c0 + w] += rng.uniform(-1.5, 1.5)
        img = (img - img.min()) / (img.max() - img.min() + 1e-12)
        out[f"synthetic_{k:03d}.pgm"] = np.rint(20 + 215 * img).astype(np.uint8)
    return out


def write_images(directory: str | Path, images: dict[str, np.ndarray]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in images.items():
        p = directory / name
        save_pgm(p, img)
        paths.append(p)
    return paths
