"""Whole-image reconstruction and PSNR/SSIM evaluation on the 0-255 scale."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

from . import tensor as T
from .cs_ops import DataError, MRIOperator
from .model import ModelConfig, ModelParams, model_forward
from .tensor import ShapeError, Tensor

__all__ = ["psnr", "ssim", "gaussian_window", "reconstruct_image", "EvalReport", "evaluate"]

PEAK = 255.0


def psnr(ref, test) -> float:
    """``10 log10(255^2 / MSE)``; ``math.inf`` for identical inputs."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"psnr: shapes {ref.shape} and {test.shape} differ")
    mse = np.mean((ref - test) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(PEAK**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    ax = np.arange(size) - half
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def ssim(ref, test, k1: float = 0.01, k2: float = 0.03, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5, L = 255)."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"ssim: shapes {ref.shape} and {test.shape} differ")
    if ref.ndim != 2 or min(ref.shape) < win:
        raise DataError(f"ssim needs a 2-D image of at least {win}x{win}, got {ref.shape}")
    c1 = (k1 * PEAK) ** 2
    c2 = (k2 * PEAK) ** 2
    w = gaussian_window(win, sigma)

    def filt(a):
        return correlate2d(a, w, mode="valid")

    mu1, mu2 = filt(ref), filt(test)
    s11 = filt(ref * ref) - mu1 * mu1
    s22 = filt(test * test) - mu2 * mu2
    s12 = filt(ref * test) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def reconstruct_image(image, op, params: ModelParams, config: ModelConfig, stride: int = 22) -> np.ndarray:
    """Sample and reconstruct a whole ``[H, W]`` image (0-255), clipped to [0, 255].

    Gaussian sampling unfolds the image into overlapping blocks at ``stride``;
    the per-block backprojections are folded with overlap averaging, and every
    stage runs on the whole image.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {img.shape}")
    if isinstance(op, MRIOperator):
        sampler = op.for_image(*img.shape)
    else:
        b = op.block
        if min(img.shape) < b:
            raise DataError(f"image {img.shape} is smaller than the {b}x{b} block")
        sampler = op.for_image(img.shape[0], img.shape[1], stride)
    dtype = params.stages[0].rho.dtype if params.stages else T.get_default_dtype()
    x = Tensor((img / PEAK)[None, None].astype(dtype))
    y = sampler.measure(x)
    out, _ = model_forward(y, sampler, params, config)
    return np.clip(out.data[0, 0].astype(np.float64) * PEAK, 0, PEAK)


@dataclass
class EvalReport:
    names: list[str]
    psnr: list[float]
    ssim: list[float]
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_dict(self) -> dict:
        return {
            "images": [
                {"name": n, "psnr": _jsonable(p), "ssim": s} for n, p, s in zip(self.names, self.psnr, self.ssim)
            ],
            "mean_psnr": _jsonable(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        width = max([len("image"), len("mean")] + [len(n) for n in self.names])
        lines = [f"{'image':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>7}"]
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            lines.append(f"{n:<{width}}  {p:>9.2f}  {s:>7.4f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:>9.2f}  {self.mean_ssim:>7.4f}")
        return "\n".join(lines)


def _jsonable(v: float):
    return "inf" if v == math.inf else v


def evaluate(images: dict, op, params: ModelParams, config: ModelConfig, stride: int = 22, echo: dict | None = None) -> EvalReport:
    names, ps, ss = [], [], []
    for name, img in images.items():
        rec = reconstruct_image(img, op, params, config, stride)
        ref = np.asarray(img, dtype=np.float64)
        names.append(name)
        ps.append(psnr(ref, rec))
        ss.append(ssim(ref, rec))
    conf = {"ratio": getattr(op, "ratio", None), "hsm": config.hsm, "clm": config.clm, "stride": stride}
    conf.update(echo or {})
    return EvalReport(names, ps, ss, conf)
