"""The unfolded K-stage reconstruction network and its ablation variants.

Each stage runs a gradient step on the data term followed by a learned
proximal mapping. Two optional memories ride along between stages:

* a multi-channel short-term feature ``z`` (``hsm``), concatenated with the
  gradient-step output before the first convolution, and tapped after the
  first convolution (``star``), after RB1 (``circle``) or after RB2 (``rb2``);
* a cross-stage long-term state ``(h, c)`` (``clm``), carried by a ConvLSTM
  between RB1 and RB2 (``lstm``), or by the simpler ``plus`` / ``concat``
  memories that carry the previous stage's pre-RB2 feature.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

__all__ = [
    "HSM_VARIANTS",
    "CLM_VARIANTS",
    "ModelConfig",
    "Conv",
    "ResidualBlock",
    "ConvLSTMParams",
    "StageParams",
    "ModelParams",
    "StageState",
    "init_params",
    "zero_weights",
    "gdm_step",
    "residual_block",
    "conv_lstm_cell",
    "proximal_forward",
    "model_forward",
]

HSM_VARIANTS = ("none", "star", "circle", "rb2")
CLM_VARIANTS = ("none", "plus", "concat", "lstm")
GATE_KERNELS = ("W_si", "W_hi", "W_sf", "W_hf", "W_sc", "W_hc", "W_so", "W_ho")
GATE_BIASES = ("b_i", "b_f", "b_c", "b_o")


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 25
    channels: int = 32
    hsm: str = "rb2"
    clm: str = "lstm"
    operator: str = "gaussian"
    ratio: float = 0.25
    block: int = 33

    def __post_init__(self):
        from .cs_ops import ConfigError

        if self.stages < 0 or self.channels < 1:
            raise ConfigError(f"need stages >= 0 and channels >= 1, got {self.stages}, {self.channels}")
        if self.hsm not in HSM_VARIANTS:
            raise ConfigError(f"hsm must be one of {HSM_VARIANTS}, got {self.hsm!r}")
        if self.clm not in CLM_VARIANTS:
            raise ConfigError(f"clm must be one of {CLM_VARIANTS}, got {self.clm!r}")
        if self.operator not in ("gaussian", "mri"):
            raise ConfigError(f"operator must be 'gaussian' or 'mri', got {self.operator!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- parameters ---------------------------------------------------------------------


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


@dataclass
class ResidualBlock:
    conv_a: Conv
    conv_b: Conv


@dataclass
class ConvLSTMParams:
    W_si: Tensor
    W_hi: Tensor
    W_sf: Tensor
    W_hf: Tensor
    W_sc: Tensor
    W_hc: Tensor
    W_so: Tensor
    W_ho: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor


@dataclass
class StageParams:
    rho: Tensor
    conv_in: Conv  # Conv1 (1 -> C) or, with short-term memory, Conv3 (C+1 -> C)
    rb1: ResidualBlock
    rb2: ResidualBlock
    conv2: Conv
    lstm: ConvLSTMParams | None = None
    merge: Conv | None = None  # concat memory only, 2C -> C


def _walk(obj, prefix: str, out: dict) -> None:
    if obj is None:
        return
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            _walk(item, f"{prefix}.{i}", out)
    else:
        for f in dataclasses.fields(obj):
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, out)


@dataclass
class ModelParams:
    """``conv0`` (present with short-term memory) plus one StageParams per stage."""

    conv0: Conv | None
    stages: list[StageParams] = field(default_factory=list)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        _walk(self, "", out)
        return out

    def count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite every tensor from ``arrays`` (names and shapes must match exactly)."""
        named = self.named_tensors()
        if set(named) != set(arrays):
            missing = sorted(set(named) - set(arrays))
            extra = sorted(set(arrays) - set(named))
            raise ContractError(f"parameter names differ: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, t in named.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=arr.dtype, copy=True)
            t.grad = None


def _kaiming(rng: np.random.Generator, cout: int, cin: int, dtype) -> Conv:
    bound = math.sqrt(6.0 / (cin * 9))
    w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
    return Conv(Tensor(w, requires_grad=True, dtype=dtype), Tensor(np.zeros(cout), requires_grad=True, dtype=dtype))


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Kaiming-uniform kernels (fan-in, ReLU gain), zero biases, ``rho = 1``."""
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    c = config.channels
    conv0 = _kaiming(rng, c, 1, dtype) if config.hsm != "none" else None
    stages = []
    for _ in range(config.stages):
        conv_in = _kaiming(rng, c, c + 1 if config.hsm != "none" else 1, dtype)
        rb1 = ResidualBlock(_kaiming(rng, c, c, dtype), _kaiming(rng, c, c, dtype))
        lstm = merge = None
        if config.clm == "lstm":
            kernels = {name: _kaiming(rng, c, c, dtype).weight for name in GATE_KERNELS}
            biases = {name: Tensor(np.zeros(c), requires_grad=True, dtype=dtype) for name in GATE_BIASES}
            lstm = ConvLSTMParams(**kernels, **biases)
        elif config.clm == "concat":
            merge = _kaiming(rng, c, 2 * c, dtype)
        rb2 = ResidualBlock(_kaiming(rng, c, c, dtype), _kaiming(rng, c, c, dtype))
        conv2 = _kaiming(rng, 1, c, dtype)
        rho = Tensor(np.ones(1), requires_grad=True, dtype=dtype)
        stages.append(StageParams(rho, conv_in, rb1, rb2, conv2, lstm, merge))
    return ModelParams(conv0, stages)


def zero_weights(params: ModelParams, keep_rho: bool = True) -> ModelParams:
    for name, t in params.named_tensors().items():
        if keep_rho and name.endswith(".rho"):
            continue
        t.data[...] = 0
    return params


# -- stage computations -------------------------------------------------------------


@dataclass
class StageState:
    """Memory carried between stages; unused fields stay None."""

    x: Tensor
    z: Tensor | None = None
    h: Tensor | None = None
    c: Tensor | None = None


def gdm_step(x_prev: Tensor, y, op, rho) -> Tensor:
    """``r = x_prev - rho * Phi^T (Phi x_prev - y)``."""
    correction = op.gradient_term(x_prev, y)
    if correction.shape != x_prev.shape:
        raise ShapeError(f"operator returned {correction.shape} for input {x_prev.shape}")
    return T.sub(x_prev, T.scale(correction, rho))


def residual_block(s: Tensor, params: ResidualBlock) -> Tensor:
    """``s + Conv(ReLU(Conv(s)))``."""
    return T.add(s, params.conv_b(T.relu(params.conv_a(s))))


def conv_lstm_cell(s: Tensor, h_prev: Tensor, c_prev: Tensor, params: ConvLSTMParams) -> tuple[Tensor, Tensor]:
    # the eight gate convolutions run as one conv over [s | h_prev]
    if not (s.shape == h_prev.shape == c_prev.shape):
        raise ShapeError(f"ConvLSTM inputs disagree: {s.shape}, {h_prev.shape}, {c_prev.shape}")
    p = params
    kernel = T.concat(
        [
            T.concat([p.W_si, p.W_hi], axis=1),
            T.concat([p.W_sf, p.W_hf], axis=1),
            T.concat([p.W_sc, p.W_hc], axis=1),
            T.concat([p.W_so, p.W_ho], axis=1),
        ],
        axis=0,
    )
    bias = T.concat([p.b_i, p.b_f, p.b_c, p.b_o], axis=0)
    gates = T.conv2d(T.concat_channels(s, h_prev), kernel, bias)
    ch = s.shape[1]
    i = T.sigmoid(T.narrow(gates, 1, 0, ch))
    f = T.sigmoid(T.narrow(gates, 1, ch, ch))
    g = T.tanh(T.narrow(gates, 1, 2 * ch, ch))
    o = T.sigmoid(T.narrow(gates, 1, 3 * ch, ch))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return h, c


def proximal_forward(r: Tensor, state: StageState, params: StageParams, config: ModelConfig) -> tuple[Tensor, StageState]:
    """One learned proximal mapping; returns ``x_next`` and the updated memory."""
    new = StageState(x=r)
    if config.hsm != "none":
        if state.z is None:
            raise ContractError(f"hsm={config.hsm} needs the previous short-term memory z")
        feat = params.conv_in(T.concat_channels(r, state.z))
    else:
        feat = params.conv_in(r)
    if config.hsm == "star":
        new.z = feat
    s = residual_block(feat, params.rb1)
    if config.hsm == "circle":
        new.z = s
    if config.clm != "none" and state.h is None:
        raise ContractError(f"clm={config.clm} needs the previous hidden state h")
    if config.clm == "lstm":
        if state.c is None:
            raise ContractError("clm=lstm needs the previous cell state c")
        s, new.c = conv_lstm_cell(s, state.h, state.c, params.lstm)
        new.h = s
    elif config.clm == "plus":
        s = T.add(s, state.h)
        new.h = s
    elif config.clm == "concat":
        s = params.merge(T.concat_channels(s, state.h))
        new.h = s
    out = residual_block(s, params.rb2)
    if config.hsm == "rb2":
        new.z = out
    x_next = T.add(r, params.conv2(out))
    new.x = x_next
    return x_next, new


def model_forward(y, op, params: ModelParams, config: ModelConfig, record: bool = False) -> tuple[Tensor, list[StageState]]:
    """Run all stages from ``x0 = Phi^T y``.

    ``op`` provides ``backproject`` and ``gradient_term`` (see ``cs_ops``).
    With ``record`` the returned list holds the initial state followed by the
    state after every stage; otherwise it is empty.
    """
    if len(params.stages) != config.stages:
        raise ContractError(f"params have {len(params.stages)} stages, config asks for {config.stages}")
    x = op.backproject(y)
    state = StageState(x=x)
    if config.stages and config.hsm != "none":
        if params.conv0 is None:
            raise ContractError("short-term memory needs conv0")
        state.z = params.conv0(x)
    if config.stages and config.clm != "none":
        shape = (x.shape[0], config.channels, x.shape[2], x.shape[3])
        state.h = T.zeros(shape, dtype=x.dtype)
        if config.clm == "lstm":
            state.c = T.zeros(shape, dtype=x.dtype)
    trajectory = [state] if record else []
    for stage in params.stages:
        r = gdm_step(x, y, op, stage.rho)
        x, state = proximal_forward(r, state, stage, config)
        if record:
            trajectory.append(state)
    return x, trajectory
