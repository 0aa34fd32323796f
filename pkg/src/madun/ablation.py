"""Variant sweeps with a shared seed and budget, reported in the layout of the
component ablation table: short-term memory tap columns plus the long-term
memory kind."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cs_ops import build_gaussian_operator
from .metrics import evaluate
from .model import CLM_VARIANTS, ModelConfig, init_params
from .trainer import BlockDataset, TrainConfig, Trainer

__all__ = ["TABLE_CASES", "GRID_CASES", "AblationRow", "smoothed", "loss_reduction", "run_ablation", "format_table"]

# (label, hsm, clm): cases (a)-(f) of the component table, then the two
# alternative long-term memories on top of the plain module
TABLE_CASES = [
    ("a", "none", "none"),
    ("b", "none", "lstm"),
    ("c", "star", "none"),
    ("d", "circle", "none"),
    ("e", "rb2", "none"),
    ("f", "rb2", "lstm"),
    ("plus", "none", "plus"),
    ("concat", "none", "concat"),
]

GRID_CASES = [(f"{h}/{c}", h, c) for h in ("none", "rb2") for c in CLM_VARIANTS]


def smoothed(losses, window: int = 20) -> np.ndarray:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses) // window
    if n == 0:
        return losses.copy()
    return losses[: n * window].reshape(n, window).mean(axis=1)


def loss_reduction(losses, window: int = 20) -> float:
    """Fractional drop from the first to the last smoothed window."""
    s = smoothed(losses, window)
    return float(1 - s[-1] / s[0])


@dataclass
class AblationRow:
    label: str
    hsm: str
    clm: str
    losses: list[float] = field(repr=False)
    psnr: float = float("nan")
    ssim: float = float("nan")
    window: int = 20

    @property
    def reduction(self) -> float:
        return loss_reduction(self.losses, self.window)

    @property
    def final_loss(self) -> float:
        return float(smoothed(self.losses, self.window)[-1])


def run_ablation(
    dataset: BlockDataset,
    cases=TABLE_CASES,
    stages: int = 3,
    channels: int = 8,
    ratio: float = 0.25,
    train_config: TrainConfig | None = None,
    test_images: dict | None = None,
    stride: int = 22,
    seed: int = 0,
    window: int = 20,
) -> list[AblationRow]:
    """Train every case from the same seed, data order and step budget."""
    tc = train_config or TrainConfig(lr=1e-3, batch_size=4, max_steps=400, epochs_phase1=10**9, seed=seed)
    rows = []
    for label, hsm, clm in cases:
        mc = ModelConfig(stages=stages, channels=channels, hsm=hsm, clm=clm, ratio=ratio, block=dataset.block)
        op = build_gaussian_operator(ratio, dataset.block**2, seed=seed)
        params = init_params(mc, seed=seed)
        trainer = Trainer(mc, params, op, TrainConfig.from_dict(tc.to_dict()), dataset)
        history = trainer.run()
        row = AblationRow(label, hsm, clm, list(history["step_loss"]), window=window)
        if test_images:
            report = evaluate(test_images, op, params, mc, stride)
            row.psnr, row.ssim = report.mean_psnr, report.mean_ssim
        rows.append(row)
    return rows


def format_table(rows: list[AblationRow]) -> str:
    mark = {True: "x", False: "-"}
    head = f"{'case':<12} {'*HSM':>5} {'oHSM':>5} {'HSM':>4} {'CLM':>7} {'loss':>9} {'drop':>6} {'PSNR/SSIM':>15}"
    lines = [head, "-" * len(head)]
    for r in rows:
        clm = "-" if r.clm == "none" else r.clm
        lines.append(
            f"{r.label:<12} {mark[r.hsm == 'star']:>5} {mark[r.hsm == 'circle']:>5} {mark[r.hsm == 'rb2']:>4} "
            f"{clm:>7} {r.final_loss:>9.5f} {r.reduction:>6.1%} {r.psnr:>7.2f}/{r.ssim:.4f}"
        )
    return "\n".join(lines)
