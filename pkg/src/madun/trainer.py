"""Adam training of the unfolded network on image blocks.

Phase 1 trains on independent ``block x block`` tiles. Phase 2 fine-tunes on
larger composites: each composite is unfolded into overlapping tiles for
sampling, and the per-tile backprojections are folded back (overlap
averaging) to initialize and drive the whole-composite reconstruction.

Training is step-deterministic: the batch stream's RNG state, its current
permutation and position, and the Adam moments are all checkpointed, so a
resumed run continues bit for bit.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, ConfigMismatchError
from .cs_ops import (
    ConfigError,
    DataError,
    GaussianOperator,
    MRIOperator,
    augment as dihedral,
    extract_blocks,
)
from .model import ModelConfig, ModelParams, init_params, model_forward
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingDiverged",
    "BlockDataset",
    "BatchStream",
    "Trainer",
    "adam_step",
    "make_dataset",
    "train",
    "operator_from_checkpoint",
    "params_from_checkpoint",
]


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_phase1: int = 200
    epochs_phase2: int = 10
    block: int = 33
    block_phase2: int = 99
    stride_phase2: int = 22
    augment: bool = True
    seed: int = 0
    learnable_phi: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- Adam -------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: OptimizerState, config: TrainConfig) -> OptimizerState:
    """Bias-corrected Adam update, in place, from each tensor's ``.grad``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (config.lr / bc1) * m / (np.sqrt(v / bc2) + config.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return state


# -- data -------------------------------------------------------------------------------


@dataclass
class BlockDataset:
    """Training targets ``x`` in [0, 1], shape ``[P, b, b]``."""

    x: np.ndarray
    block: int
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    def vectors(self) -> np.ndarray:
        """Raster-ordered ``[P, b*b]`` targets."""
        return self.x.reshape(len(self), -1)

    def pairs(self, op: GaussianOperator) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(y, x)`` pairs with ``y = Phi x`` for single-tile blocks."""
        vec = self.vectors().astype(op.phi.dtype)
        y = vec @ op.phi.data.T
        return list(zip(y, vec))


def make_dataset(
    images,
    block: int = 33,
    stride: int | None = None,
    augment: bool = False,
    seed: int = 0,
) -> BlockDataset:
    """Cut luminance tiles from a directory or a ``{name: uint8 image}`` mapping.

    Tiles are optionally expanded with all eight dihedral transforms and
    shuffled with ``seed``.
    """
    if isinstance(images, (str, Path)):
        from .data import load_directory

        images = load_directory(images)
    if not images:
        raise DataError("no training images")
    small = [name for name, img in images.items() if min(np.shape(img)) < block]
    if small:
        raise DataError(f"images smaller than {block}x{block}: {', '.join(small)}")
    tiles, sources = [], []
    for name, img in images.items():
        blocks, _ = extract_blocks(np.asarray(img, dtype=np.float64) / 255.0, block, stride or block)
        for b in blocks:
            variants = [dihedral(b, k) for k in range(8)] if augment else [b]
            tiles.extend(variants)
            sources.extend([name] * len(variants))
    order = np.random.default_rng(seed).permutation(len(tiles))
    x = np.stack([tiles[i] for i in order]).astype(T.get_default_dtype())
    return BlockDataset(x=x, block=block, sources=[sources[i] for i in order])


class BatchStream:
    """Endless seeded mini-batches: a fresh permutation per epoch."""

    def __init__(self, size: int, batch_size: int, seed: int):
        self.size = size
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.perm: np.ndarray | None = None
        self.pos = 0
        self.epoch = 0

    def next(self) -> tuple[np.ndarray, bool]:
        """Indices of the next batch and whether it closes an epoch."""
        if self.perm is None:
            self.perm = self.rng.permutation(self.size)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.batch_size]
        self.pos += len(idx)
        done = self.pos >= self.size
        if done:
            self.perm = None
            self.epoch += 1
        return idx, done

    def state(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "perm": None if self.perm is None else self.perm.tolist(),
            "pos": self.pos,
            "epoch": self.epoch,
        }

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.perm = None if state["perm"] is None else np.asarray(state["perm"], dtype=np.int64)
        self.pos = state["pos"]
        self.epoch = state["epoch"]


# -- training ---------------------------------------------------------------------------


class Trainer:
    """Holds everything a training run mutates: params, Phi, Adam state, batch streams."""

    def __init__(
        self,
        model_config: ModelConfig,
        params: ModelParams,
        op,
        config: TrainConfig,
        dataset: BlockDataset,
        dataset_phase2: BlockDataset | None = None,
    ):
        if config.learnable_phi and not isinstance(op, GaussianOperator):
            raise ConfigError("a learnable sampling matrix needs the Gaussian operator")
        self.model_config = model_config
        self.params = params
        self.op = op
        self.config = config
        if isinstance(op, GaussianOperator):
            op.learnable = config.learnable_phi
            op.phi.requires_grad = config.learnable_phi
        self.datasets = [dataset]
        self.epochs = [config.epochs_phase1]
        if dataset_phase2 is not None and config.epochs_phase2 > 0:
            self.datasets.append(dataset_phase2)
            self.epochs.append(config.epochs_phase2)
        self.streams = [
            BatchStream(len(ds), config.batch_size, config.seed + i) for i, ds in enumerate(self.datasets)
        ]
        self.samplers = [self._sampler(ds) for ds in self.datasets]
        self.optimizer = OptimizerState()
        self.step = 0
        self.history: dict = {"step_loss": [], "epoch_loss": [], "epoch_phase": [], "epoch_start": 0}

    def _sampler(self, ds: BlockDataset):
        if isinstance(self.op, MRIOperator):
            return self.op.for_image(ds.block, ds.block)
        stride = self.config.stride_phase2 if ds.block != self.op.block else None
        return self.op.for_image(ds.block, ds.block, stride)

    @property
    def trainable(self) -> dict[str, Tensor]:
        named = {f"params.{k}": v for k, v in self.params.named_tensors().items()}
        if self.config.learnable_phi:
            named["operator.phi"] = self.op.phi
        return named

    @property
    def phase(self) -> int:
        for i, (stream, epochs) in enumerate(zip(self.streams, self.epochs)):
            if stream.epoch < epochs:
                return i
        return len(self.streams)

    @property
    def epoch(self) -> int:
        return sum(s.epoch for s in self.streams)

    def batch_loss(self, x: np.ndarray, sampler) -> Tensor:
        """L1 loss of a batch ``[B, b, b]``, normalized by B times pixels per sample."""
        dtype = self.params.stages[0].rho.dtype if self.params.stages else T.get_default_dtype()
        target = Tensor(x[:, None].astype(dtype))
        y = sampler.measure(target)
        out, _ = model_forward(y, sampler, self.params, self.model_config)
        return T.l1_mean(out, target)

    def train_step(self, x: np.ndarray, sampler) -> float:
        params = self.trainable
        for p in params.values():
            p.grad = None
        loss = self.batch_loss(x, sampler)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {self.step}")
        T.backward(loss)
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(params, self.optimizer, self.config)
        self.step += 1
        return value

    def run(self, steps: int | None = None, callback: Callable[["Trainer"], None] | None = None) -> dict:
        """Train until the schedule ends, ``max_steps`` is reached, or ``steps`` more steps ran."""
        target = None if steps is None else self.step + steps
        while True:
            if self.config.max_steps is not None and self.step >= self.config.max_steps:
                break
            if target is not None and self.step >= target:
                break
            phase = self.phase
            if phase >= len(self.streams):
                break
            ds, stream = self.datasets[phase], self.streams[phase]
            idx, epoch_done = stream.next()
            value = self.train_step(ds.x[idx], self.samplers[phase])
            self.history["step_loss"].append(value)
            if epoch_done:
                start = self.history["epoch_start"]
                self.history["epoch_loss"].append(float(np.mean(self.history["step_loss"][start:])))
                self.history["epoch_phase"].append(phase + 1)
                self.history["epoch_start"] = len(self.history["step_loss"])
                log.info("phase %d epoch %d loss %.6f", phase + 1, stream.epoch, self.history["epoch_loss"][-1])
            if callback is not None:
                callback(self)
        return self.history

    # -- persistence ---------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors = {f"params.{k}": v.data for k, v in self.params.named_tensors().items()}
        tensors.update(_operator_tensors(self.op))
        for name, m in self.optimizer.m.items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = self.optimizer.v[name]
        return Checkpoint(
            model_config=self.model_config.to_dict(),
            tensors=tensors,
            step=self.step,
            epoch=self.epoch,
            history=self.history,
            metadata={
                "operator": _operator_meta(self.op),
                "train_config": self.config.to_dict(),
                "adam_step": self.optimizer.step,
                "streams": [s.state() for s in self.streams],
            },
        )

    def load_state(self, ckpt: Checkpoint) -> None:
        """Restore a run saved by :meth:`checkpoint` into this (identically configured) trainer."""
        if ckpt.model_config != self.model_config.to_dict():
            raise ConfigMismatchError(
                f"checkpoint model config {ckpt.model_config} != run config {self.model_config.to_dict()}"
            )
        self.params.load_arrays(ckpt.group("params"))
        if isinstance(self.op, GaussianOperator) and "operator.phi" in ckpt.tensors:
            self.op.phi.data = ckpt.tensors["operator.phi"].copy()
        m = {k[len("adam.m.") :]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v.") :]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("adam.v.")}
        self.optimizer = OptimizerState(m, v, ckpt.metadata.get("adam_step", 0))
        streams = ckpt.metadata.get("streams", [])
        if len(streams) != len(self.streams):
            raise ConfigMismatchError(f"checkpoint has {len(streams)} batch streams, run has {len(self.streams)}")
        for s, st in zip(self.streams, streams):
            s.set_state(st)
        self.step = ckpt.step
        self.history = {
            "step_loss": list(ckpt.history.get("step_loss", [])),
            "epoch_loss": list(ckpt.history.get("epoch_loss", [])),
            "epoch_phase": list(ckpt.history.get("epoch_phase", [])),
            "epoch_start": ckpt.history.get("epoch_start", 0),
        }


def _operator_tensors(op) -> dict[str, np.ndarray]:
    if isinstance(op, GaussianOperator):
        return {"operator.phi": op.phi.data}
    return {"operator.mask": op.mask.astype(np.float32)}


def _operator_meta(op) -> dict:
    if isinstance(op, GaussianOperator):
        return {"kind": "gaussian", "ratio": op.ratio, "n": op.n, "seed": op.seed, "learnable": op.learnable}
    return {"kind": "mri", "shape": list(op.mask.shape), "ratio": op.ratio}


def operator_from_checkpoint(ckpt: Checkpoint):
    meta = ckpt.metadata.get("operator", {})
    if meta.get("kind") == "mri":
        return MRIOperator(ckpt.tensors["operator.mask"] != 0)
    phi = ckpt.tensors.get("operator.phi")
    if phi is None:
        raise ConfigMismatchError("checkpoint carries no sampling matrix")
    return GaussianOperator(
        phi=Tensor(phi.copy(), dtype=phi.dtype, name="phi"),
        ratio=meta.get("ratio", phi.shape[0] / phi.shape[1]),
        n=phi.shape[1],
        seed=meta.get("seed", 0),
    )


def params_from_checkpoint(ckpt: Checkpoint, expected: ModelConfig | None = None) -> tuple[ModelConfig, ModelParams]:
    config = ModelConfig.from_dict(ckpt.model_config)
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"checkpoint was written for {config}, expected {expected}")
    arrays = ckpt.group("params")
    dtype = next(iter(arrays.values())).dtype if arrays else None
    params = init_params(config, seed=0, dtype=dtype)
    params.load_arrays(arrays)
    return config, params


def train(
    params: ModelParams,
    dataset: BlockDataset,
    config: TrainConfig,
    model_config: ModelConfig,
    op,
    dataset_phase2: BlockDataset | None = None,
) -> tuple[ModelParams, dict]:
    """Run the full schedule and return the trained params and loss history."""
    trainer = Trainer(model_config, params, op, config, dataset, dataset_phase2)
    history = trainer.run()
    return trainer.params, history
