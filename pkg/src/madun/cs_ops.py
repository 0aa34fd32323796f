"""Measurement operators and block utilities for natural-image CS and CS-MRI.

Two operator families share one duck-typed interface used by the model:

``measure(x)``
    images ``[B, 1, H, W]`` to measurements,
``backproject(y)``
    measurements to images (the initialization ``x0``),
``gradient_term(x, y)``
    ``Phi^T (Phi x - y)`` as a differentiable tensor.

Gaussian sampling is block-based; a :class:`BlockSampler` binds a
:class:`GaussianOperator` to an image size through a :class:`BlockGrid`.
For overlapping grids the backprojection folds blocks by per-pixel averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "ConfigError",
    "DataError",
    "GaussianOperator",
    "MRIOperator",
    "BlockGrid",
    "BlockSampler",
    "build_gaussian_operator",
    "sample",
    "adjoint",
    "mri_forward",
    "mri_adjoint",
    "mri_normal",
    "load_mask",
    "save_mask",
    "make_grid",
    "extract_blocks",
    "fold_average",
    "unfold_image",
    "fold_image",
    "augment",
]


class ConfigError(ValueError):
    """Invalid configuration value."""


class DataError(ValueError):
    """Input data unusable for the requested operation."""


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- Gaussian sampling -------------------------------------------------------------


@dataclass
class GaussianOperator:
    """Row-orthonormal Gaussian measurement matrix ``phi`` of shape ``[m, n]``."""

    phi: Tensor
    ratio: float
    n: int
    seed: int
    learnable: bool = False

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def block(self) -> int:
        b = math.isqrt(self.n)
        if b * b != self.n:
            raise ShapeError(f"block size undefined for n={self.n} (not a square)")
        return b

    def for_image(self, height: int | None = None, width: int | None = None, stride: int | None = None) -> "BlockSampler":
        b = self.block
        height = height or b
        width = width or height
        return BlockSampler(self, make_grid(height, width, b, stride or b))

    def measure(self, x: Tensor) -> Tensor:
        return sample(self, x)

    def backproject(self, y: Tensor) -> Tensor:
        return adjoint(self, y)

    def gradient_term(self, x: Tensor, y: Tensor) -> Tensor:
        return adjoint(self, T.sub(sample(self, x), y))


def build_gaussian_operator(ratio: float, n: int = 1089, seed: int = 0, learnable: bool = False, dtype=None) -> GaussianOperator:
    """Draw an i.i.d. standard normal ``[m, n]`` matrix and orthonormalize its rows.

    ``m = max(1, round(ratio * n))``. Orthonormalization is a reduced QR of the
    transpose, computed in float64 and cast to ``dtype`` afterwards.
    """
    if not (0 < ratio <= 1):
        raise ConfigError(f"CS ratio must lie in (0, 1], got {ratio}")
    if n < 1:
        raise ConfigError(f"signal length must be positive, got {n}")
    m = max(1, int(round(ratio * n)))
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((m, n))
    q, r = np.linalg.qr(gauss.T)
    # fix the sign ambiguity of QR so the rows follow the drawn Gaussian rows
    q = q * np.sign(np.diag(r))
    phi = Tensor(q.T, requires_grad=learnable, dtype=dtype or T.get_default_dtype(), name="phi")
    return GaussianOperator(phi=phi, ratio=float(ratio), n=n, seed=int(seed), learnable=learnable)


def sample(op: GaussianOperator, x: Tensor) -> Tensor:
    """``y = Phi x`` for ``x`` of shape ``[n]``, ``[B, n]`` or a single-block image ``[B, 1, b, b]``."""
    if x.ndim == 1:
        return T.matvec(op.phi, x)
    if x.ndim == 4:
        if x.shape[1] != 1 or x.shape[2] * x.shape[3] != op.n:
            raise ShapeError(f"image batch {x.shape} is not a batch of {op.n}-pixel blocks")
        x = T.reshape(x, (x.shape[0], op.n))
    if x.ndim != 2 or x.shape[1] != op.n:
        raise ShapeError(f"sample: expected trailing length {op.n}, got shape {x.shape}")
    return T.matmul(x, T.transpose(op.phi))


def adjoint(op: GaussianOperator, y: Tensor) -> Tensor:
    """``Phi^T y`` for ``y`` of shape ``[m]`` or ``[B, m]``; batches come back as ``[B, 1, b, b]``."""
    if y.ndim == 1:
        if y.shape[0] != op.m:
            raise ShapeError(f"adjoint: expected length {op.m}, got {y.shape[0]}")
        return T.matvec(T.transpose(op.phi), y)
    if y.ndim != 2 or y.shape[1] != op.m:
        raise ShapeError(f"adjoint: expected [B, {op.m}], got {y.shape}")
    out = T.matmul(y, op.phi)
    b = math.isqrt(op.n)
    if b * b == op.n:
        return T.reshape(out, (y.shape[0], 1, b, b))
    return out


# -- blocks --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockGrid:
    """Raster-ordered block anchors covering an image, with overlap counts."""

    block: int
    stride: int
    height: int
    width: int
    rows: tuple[int, ...]
    cols: tuple[int, ...]
    counts: np.ndarray = field(repr=False, compare=False)

    @property
    def positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)


def _anchors(size: int, block: int, stride: int) -> tuple[int, ...]:
    out = list(range(0, size - block + 1, stride))
    if out[-1] != size - block:
        out.append(size - block)
    return tuple(out)


def make_grid(height: int, width: int, block: int = 33, stride: int = 33) -> BlockGrid:
    if block < 1 or stride < 1:
        raise ConfigError(f"block and stride must be positive, got {block}, {stride}")
    if stride > block:
        raise ConfigError(f"stride {stride} > block {block} would leave pixels uncovered")
    if block > height or block > width:
        raise ConfigError(f"block size {block} exceeds image size {height}x{width}")
    rows, cols = _anchors(height, block, stride), _anchors(width, block, stride)
    counts = np.zeros((height, width), dtype=np.int64)
    for r in rows:
        for c in cols:
            counts[r : r + block, c : c + block] += 1
    return BlockGrid(block, stride, height, width, rows, cols, counts)


def extract_blocks(image, block: int = 33, stride: int | None = None) -> tuple[list[np.ndarray], BlockGrid]:
    """Cut ``image`` into raster-ordered ``block x block`` tiles.

    The last row/column of tiles is anchored to the image edge when ``stride``
    does not divide the remaining extent.
    """
    img = _as_array(image)
    if img.ndim != 2:
        raise ShapeError(f"extract_blocks expects a 2-D image, got shape {img.shape}")
    grid = make_grid(img.shape[0], img.shape[1], block, stride or block)
    blocks = [img[r : r + block, c : c + block].copy() for r, c in grid.positions]
    return blocks, grid


def fold_average(blocks, grid: BlockGrid) -> np.ndarray:
    """Sum the tiles back into place and divide by per-pixel coverage."""
    blocks = [_as_array(b) for b in blocks]
    if len(blocks) != len(grid):
        raise T.ContractError(f"grid has {len(grid)} blocks, got {len(blocks)}")
    dtype = np.result_type(*[b.dtype for b in blocks], np.float32)
    acc = np.zeros((grid.height, grid.width), dtype=dtype)
    b = grid.block
    for (r, c), tile in zip(grid.positions, blocks):
        if tile.shape != (b, b):
            raise ShapeError(f"block shape {tile.shape} != ({b}, {b})")
        acc[r : r + b, c : c + b] += tile
    return acc / grid.counts.astype(dtype)


def _gather(x: np.ndarray, grid: BlockGrid) -> np.ndarray:
    b = grid.block
    tiles = [x[:, 0, r : r + b, c : c + b].reshape(x.shape[0], b * b) for r, c in grid.positions]
    return np.stack(tiles, axis=1).reshape(-1, b * b)


def _scatter(blocks: np.ndarray, grid: BlockGrid, batch: int) -> np.ndarray:
    b = grid.block
    tiles = blocks.reshape(batch, len(grid), b, b)
    out = np.zeros((batch, 1, grid.height, grid.width), dtype=blocks.dtype)
    for i, (r, c) in enumerate(grid.positions):
        out[:, 0, r : r + b, c : c + b] += tiles[:, i]
    return out


def unfold_image(x: Tensor, grid: BlockGrid) -> Tensor:
    """Differentiable ``[B, 1, H, W] -> [B * nblocks, b * b]`` (block-major within each image)."""
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (grid.height, grid.width):
        raise ShapeError(f"unfold_image: {x.shape} does not match grid {grid.height}x{grid.width}")
    batch = x.shape[0]
    return Tensor.from_op(_gather(x.data, grid), (x,), lambda g: (_scatter(g, grid, batch),))


def fold_image(blocks: Tensor, grid: BlockGrid) -> Tensor:
    """Differentiable inverse of :func:`unfold_image` with overlap averaging."""
    nb = len(grid)
    if blocks.ndim != 2 or blocks.shape[1] != grid.block**2 or blocks.shape[0] % nb:
        raise ShapeError(f"fold_image: {blocks.shape} inconsistent with {nb} blocks of {grid.block}^2")
    batch = blocks.shape[0] // nb
    counts = grid.counts.astype(blocks.dtype)
    out = _scatter(blocks.data, grid, batch) / counts

    def back(g):
        return (_gather(g / counts, grid),)

    return Tensor.from_op(out, (blocks,), back)


@dataclass
class BlockSampler:
    """A Gaussian operator applied tile-wise to whole ``[B, 1, H, W]`` images.

    Measurements have shape ``[B * nblocks, m]``. The backprojection applies
    ``Phi^T`` per block and folds with overlap averaging. For a single-tile
    grid this is exactly the plain block operator.
    """

    op: GaussianOperator
    grid: BlockGrid

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid.height, self.grid.width

    def _single(self) -> bool:
        return len(self.grid) == 1

    def measure(self, x: Tensor) -> Tensor:
        if self._single():
            return sample(self.op, x)
        return T.matmul(unfold_image(x, self.grid), T.transpose(self.op.phi))

    def backproject(self, y: Tensor) -> Tensor:
        if self._single():
            return adjoint(self.op, y)
        return fold_image(T.matmul(y, self.op.phi), self.grid)

    def gradient_term(self, x: Tensor, y: Tensor) -> Tensor:
        return self.backproject(T.sub(self.measure(x), y))


# -- MRI ------------------------------------------------------------------------------


@dataclass
class MRIOperator:
    """``Phi = B F``: binary k-space mask times the unitary 2-D DFT.

    ``measure`` returns complex k-space as a plain ndarray ``[B, H, W]``
    (measurements are data, never differentiated); ``gradient_term`` is a
    differentiable real tensor.
    """

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.mask.shape}")

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def ratio(self) -> float:
        return float(self.mask.mean())

    def for_image(self, height=None, width=None, stride=None) -> "MRIOperator":
        if (height or self.mask.shape[0], width or self.mask.shape[1]) != self.mask.shape:
            raise ShapeError(f"image {height}x{width} does not match mask {self.mask.shape}")
        return self

    def _check(self, shape) -> None:
        if tuple(shape[-2:]) != self.mask.shape:
            raise ShapeError(f"image shape {tuple(shape[-2:])} != mask shape {self.mask.shape}")

    def measure(self, x: Tensor) -> np.ndarray:
        self._check(x.shape)
        return self.mask * np.fft.fft2(x.data[:, 0], norm="ortho")

    def backproject(self, y: np.ndarray) -> Tensor:
        self._check(y.shape)
        dtype = T.get_default_dtype()
        img = np.fft.ifft2(self.mask * y, norm="ortho").real
        return Tensor(img[:, None].astype(dtype), dtype=dtype)

    def gradient_term(self, x: Tensor, y: np.ndarray) -> Tensor:
        self._check(x.shape)
        back = np.fft.ifft2(self.mask * y, norm="ortho").real[:, None].astype(x.dtype)
        return T.sub(_mri_gram(self, x), Tensor(back))


def _gram_array(mask: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(mask * np.fft.fft2(x, norm="ortho"), norm="ortho").real.astype(x.dtype)


def _mri_gram(op: MRIOperator, x: Tensor) -> Tensor:
    # Re(F^H B F) is self-adjoint on real images, so it is its own backward
    return Tensor.from_op(_gram_array(op.mask, x.data), (x,), lambda g: (_gram_array(op.mask, g),))


def mri_forward(op: MRIOperator, x) -> np.ndarray:
    """Masked unitary DFT of a real ``[H, W]`` image; returns complex k-space."""
    img = _as_array(x)
    op._check(img.shape)
    return op.mask * np.fft.fft2(img, norm="ortho")


def mri_adjoint(op: MRIOperator, k: np.ndarray) -> np.ndarray:
    """Real part of the unitary inverse DFT of masked k-space."""
    k = np.asarray(k)
    op._check(k.shape)
    return np.fft.ifft2(op.mask * k, norm="ortho").real


def mri_normal(op: MRIOperator, x: np.ndarray) -> np.ndarray:
    """Complex ``F^H B^H B F x`` (a projection)."""
    x = np.asarray(x)
    op._check(x.shape)
    return np.fft.ifft2(op.mask * np.fft.fft2(x, norm="ortho"), norm="ortho")


def load_mask(path: str | Path) -> MRIOperator:
    """Read an 8-bit PGM mask; nonzero pixels are sampled k-space locations."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from None
    return MRIOperator(arr != 0)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255).save(path, format="PPM")


# -- augmentation --------------------------------------------------------------------


def augment(block, index: int):
    """Dihedral transform ``index`` in 0..7: ``index % 4`` quarter turns, then a
    left-right flip when ``index >= 4``. Index 7 is the transpose."""
    if not 0 <= index <= 7:
        raise ConfigError(f"augmentation index must be in 0..7, got {index}")
    arr = np.rot90(_as_array(block), k=index % 4)
    if index >= 4:
        arr = np.fliplr(arr)
    return np.ascontiguousarray(arr)
