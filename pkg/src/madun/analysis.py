"""Memory diagnostics: ConvLSTM gate kernel norms and radial DCT spectra."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn

from .model import ModelConfig, ModelParams
from .tensor import ContractError, Tensor

__all__ = [
    "SpectralCurve",
    "gate_weight_norms",
    "spectral_density",
    "average_curves",
    "norms_csv",
    "curves_csv",
]

GATES = {"input": ("W_si", "W_hi"), "forget": ("W_sf", "W_hf"), "output": ("W_so", "W_ho")}


def gate_weight_norms(params: ModelParams, config: ModelConfig | None = None) -> list[dict[str, float]]:
    """Per stage, the mean Frobenius norm of each gate's input- and hidden-path kernels."""
    if config is not None and config.clm != "lstm":
        raise ContractError(f"gate norms need the ConvLSTM memory, model uses clm={config.clm!r}")
    rows = []
    for k, stage in enumerate(params.stages, start=1):
        if stage.lstm is None:
            raise ContractError(f"stage {k} has no ConvLSTM parameters")
        row = {"stage": k}
        for gate, names in GATES.items():
            row[gate] = float(np.mean([np.linalg.norm(getattr(stage.lstm, n).data.astype(np.float64)) for n in names]))
        rows.append(row)
    return rows


@dataclass
class SpectralCurve:
    """Mean DCT power per radial frequency bin (bin centers in [0, 1])."""

    frequencies: np.ndarray
    power: np.ndarray
    counts: np.ndarray

    @property
    def energy(self) -> float:
        return float(np.sum(self.power * self.counts))


def spectral_density(feature, bins: int = 32) -> SpectralCurve:
    """Radially binned power of the orthonormal 2-D DCT-II, pooled over channels.

    A coefficient ``(u, v)`` sits at radius ``sqrt(u^2 + v^2) / sqrt(2 (H-1)^2)``;
    bins are ``[i/bins, (i+1)/bins)`` with radius 1 folded into the last bin.
    """
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ContractError(f"expected a [1, C, H, W] feature map, got shape {arr.shape}")
    h, w = arr.shape[-2:]
    if h != w:
        raise ContractError(f"spectral density needs square feature maps, got {h}x{w}")
    coeffs = dctn(arr, type=2, axes=(-2, -1), norm="ortho")
    power = (coeffs**2).reshape(-1, h, w)
    if h > 1:
        u = np.arange(h)
        radius = np.sqrt(u[:, None] ** 2 + u[None, :] ** 2) / math.sqrt(2 * (h - 1) ** 2)
    else:
        radius = np.zeros((1, 1))
    which = np.minimum((radius * bins).astype(int), bins - 1)
    per_coeff = np.bincount(which.ravel(), minlength=bins)
    total = np.zeros(bins)
    for plane in power:
        total += np.bincount(which.ravel(), weights=plane.ravel(), minlength=bins)
    counts = per_coeff * power.shape[0]
    mean = np.divide(total, counts, out=np.zeros(bins), where=counts > 0)
    freqs = (np.arange(bins) + 0.5) / bins
    return SpectralCurve(freqs, mean, counts)


def average_curves(curves: list[SpectralCurve]) -> SpectralCurve:
    """Pool several curves coefficient-wise (weights are the bin counts)."""
    if not curves:
        raise ContractError("no curves to average")
    counts = np.sum([c.counts for c in curves], axis=0)
    total = np.sum([c.power * c.counts for c in curves], axis=0)
    mean = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return SpectralCurve(curves[0].frequencies.copy(), mean, counts)


def norms_csv(rows: list[dict[str, float]], header_note: str | None = None) -> str:
    buf = io.StringIO()
    if header_note:
        buf.write(f"# {header_note}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "input", "forget", "output"])
    for r in rows:
        writer.writerow([r["stage"], f"{r['input']:.8g}", f"{r['forget']:.8g}", f"{r['output']:.8g}"])
    return buf.getvalue()


def curves_csv(curves: dict[str, SpectralCurve], header_note: str | None = None) -> str:
    """One ``frequency`` column plus one power column per named curve."""
    buf = io.StringIO()
    if header_note:
        buf.write(f"# {header_note}\n")
    writer = csv.writer(buf, lineterminator="\n")
    names = list(curves)
    writer.writerow(["frequency", *names])
    freqs = next(iter(curves.values())).frequencies
    for i, f in enumerate(freqs):
        writer.writerow([f"{f:.6f}", *(f"{curves[n].power[i]:.8g}" for n in names)])
    return buf.getvalue()
