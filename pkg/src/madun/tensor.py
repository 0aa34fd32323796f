"""Dense tensors with a small reverse-mode autodiff engine.

Arrays live in NumPy; every differentiable op records its parents and a
backward closure on the output tensor. ``backward`` orders the reachable
nodes by creation sequence (outputs are always created after their inputs,
so reverse creation order is a valid reverse topological order) and replays
that tape once.

Binary ops require identical shapes. The single exception is ``scale``,
which multiplies a tensor by a Python number or a one-element tensor.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "GradCheckReport",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "elementwise",
    "sum",
    "reshape",
    "transpose",
    "matmul",
    "matvec",
    "concat",
    "concat_channels",
    "narrow",
    "conv2d",
    "l1_mean",
    "build_tape",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


_default_dtype = np.dtype(np.float32)
_sequence = itertools.count()


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (``"float32"``/``"float64"``)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else None
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        """Wrap an op result; the graph is recorded only if some parent needs grad.

        ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
        """
        out = cls(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> list["Tensor"]:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype))


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "subtract")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a Python number or a one-element tensor (gradient flows to both)."""
    if not isinstance(s, Tensor):
        s = float(s)
        return Tensor.from_op(x.data * x.dtype.type(s), (x,), lambda g: (g * x.dtype.type(s),))
    if s.size != 1:
        raise ShapeError(f"scale factor must have one element, got shape {s.shape}")
    xd = x.data
    sv = s.data.reshape(())

    def back(g):
        gs = np.asarray(np.sum(g * xd), dtype=s.dtype).reshape(s.shape)
        return g * sv, gs

    return Tensor.from_op(xd * sv, (x, s), back)


def neg(x: Tensor) -> Tensor:
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1 - out * out),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "neg": neg}
_BINARY = {"add": add, "subtract": sub, "hadamard": mul}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: relu, sigmoid, tanh, neg, add, subtract, hadamard, scale."""
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = operands
        return _BINARY[op](a, b)
    if op == "scale":
        x, s = operands
        return scale(x, s)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and reshaping ----------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return Tensor.from_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), back)


def matvec(matrix: Tensor, vector: Tensor) -> Tensor:
    if matrix.ndim != 2 or vector.ndim != 1 or matrix.shape[1] != vector.shape[0]:
        raise ShapeError(f"matvec: shapes {matrix.shape} and {vector.shape} do not chain")
    md, vd = matrix.data, vector.data

    def back(g):
        gm = np.outer(g, vd) if matrix.requires_grad else None
        gv = md.T @ g if vector.requires_grad else None
        return gm, gv

    return Tensor.from_op(md @ vd, (matrix, vector), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s (NCHW)."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree")
    return concat([a, b], axis=1)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for axis size {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(x.data[index]), (x,), back)


# -- convolution -------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded (zeros) 2-D cross-correlation, NCHW input, OIHW kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # tap-major columns: cols[n, i, j, c, y, x] = xp[n, c, y + i, x + j]
    cols = np.empty((n, kh, kw, cin, h, w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    cols = cols.reshape(n, kh * kw * cin, h * w)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, h, w)

    def back(g):
        gmat = g.reshape(n, cout, h * w)
        gk = None
        if kernel.requires_grad:
            gk = (gmat @ cols.transpose(0, 2, 1)).sum(axis=0)
            gk = gk.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(n, kh, kw, cin, h, w)
            gxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h, j : j + w] += gcols[:, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, back)


# -- loss ---------------------------------------------------------------------------


def l1_mean(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    _check_same(pred, target, "l1_mean")
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray(np.abs(diff).sum() / count, dtype=pred.dtype)

    def back(g):
        s = np.sign(diff) * (g / count)
        return s, -s

    return Tensor.from_op(out, (pred, target), back)


# -- engine -------------------------------------------------------------------------


def build_tape(loss: Tensor) -> list[Tensor]:
    """Return every node reachable from ``loss`` that carries grad, in replay order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate dloss/dleaf into ``.grad`` of every requires_grad leaf.

    Returns the replayed tape. Gradients add onto existing ``.grad`` buffers.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = build_tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in tape:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            else:
                pending[key] = np.array(pg, dtype=parent.dtype, copy=True).reshape(parent.shape)
    return tape


# -- verification -------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients to central differences."""

    max_rel_error: float
    tolerance: float
    errors: list[np.ndarray] = field(repr=False)
    analytic: list[np.ndarray] = field(repr=False)
    numeric: list[np.ndarray] = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    point: Tensor | Iterable[Tensor],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``point`` is a tensor (``f`` receives it) or a sequence of tensors that
    ``f`` closes over (``f`` is called without arguments). The relative error
    per coordinate is ``|a - n| / max(|a|, |n|, floor)``. ``coords`` limits the
    check to a seeded random subset of coordinates per tensor.
    """
    single = isinstance(point, Tensor)
    points = [point] if single else list(point)

    def evaluate() -> Tensor:
        out = f(point) if single else f()
        if out.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        return out

    first, second = evaluate().item(), evaluate().item()
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise ContractError(f"function is not deterministic ({first!r} != {second!r})")

    for p in points:
        p.requires_grad = True
        p.grad = None
    backward(evaluate())
    rng = np.random.default_rng(seed)
    errors, analytic, numeric = [], [], []
    worst = 0.0
    for p in points:
        a = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        flat = p.data.reshape(-1)
        idx = np.arange(p.size)
        if coords is not None and coords < p.size:
            idx = np.sort(rng.choice(p.size, size=coords, replace=False))
        num = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = evaluate().item()
            flat[i] = orig - epsilon
            down = evaluate().item()
            flat[i] = orig
            num[j] = (up - down) / (2 * epsilon)
        an = a[idx]
        err = np.abs(an - num) / np.maximum(np.maximum(np.abs(an), np.abs(num)), floor)
        errors.append(err)
        analytic.append(an)
        numeric.append(num)
        if err.size:
            worst = max(worst, float(err.max()))
    return GradCheckReport(worst, tolerance, errors, analytic, numeric)
