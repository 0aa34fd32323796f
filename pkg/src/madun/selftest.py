"""Quick oracle and gradient checks runnable from an installed package."""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import spectral_density
from .cs_ops import MRIOperator, build_gaussian_operator, extract_blocks, fold_average, mri_adjoint, mri_forward
from .metrics import psnr, ssim
from .model import ModelConfig, conv_lstm_cell, init_params, model_forward, zero_weights


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Same-padded cross-correlation by explicit loops (reference only)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, cout, h, wd))
    for a in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                ii, jj = i + u - ph, j + v - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[a, c, ii, jj] * w[o, c, u, v]
                    out[a, o, i, j] = acc
    return out


def _conv_oracle() -> bool:
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    return np.allclose(got, naive_conv2d(x, w, b), rtol=1e-6, atol=1e-9)


def _primitive_grads() -> bool:
    rng = np.random.default_rng(1)
    a = T.Tensor(rng.standard_normal((1, 2, 5, 5)))
    k = T.Tensor(rng.standard_normal((3, 2, 3, 3)))
    bias = T.Tensor(rng.standard_normal(3))
    target = T.Tensor(rng.standard_normal((1, 3, 5, 5)))
    f = lambda: T.l1_mean(T.tanh(T.conv2d(T.sigmoid(a), k, bias)), target)  # noqa: E731
    return T.grad_check(f, [a, k, bias]).passed


def _operator() -> bool:
    op = build_gaussian_operator(0.25, 1089, seed=0)
    phi = op.phi.data.astype(np.float64)
    ortho = np.abs(phi @ phi.T - np.eye(op.m)).max() <= 1e-5
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(1089), rng.standard_normal(op.m)
    adj = abs((phi @ x) @ y - x @ (phi.T @ y)) <= 1e-6 * np.linalg.norm(x) * np.linalg.norm(y)
    return bool(ortho and adj)


def _mri() -> bool:
    rng = np.random.default_rng(3)
    op = MRIOperator(rng.random((16, 16)) < 0.4)
    x = rng.standard_normal((16, 16))
    k = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    lhs = np.real(np.vdot(k, mri_forward(op, x)))
    rhs = np.sum(x * mri_adjoint(op, k))
    full = MRIOperator(np.ones((16, 16)))
    return abs(lhs - rhs) <= 1e-6 * abs(lhs) and np.allclose(mri_adjoint(full, mri_forward(full, x)), x, atol=1e-6)


def _blocks() -> bool:
    img = np.random.default_rng(4).random((99, 99))
    ok = True
    for stride in (11, 22, 33):
        blocks, grid = extract_blocks(img, 33, stride)
        ok &= np.abs(fold_average(blocks, grid) - img).max() < 1e-6
    return bool(ok)


def _metrics() -> bool:
    ref = np.random.default_rng(5).integers(0, 200, (32, 32)).astype(float)
    return abs(psnr(ref, ref + 16) - 24.0486) < 1e-3 and ssim(ref, ref) == 1.0 and psnr(ref, ref) == math.inf


def _spectrum() -> bool:
    feat = np.random.default_rng(6).standard_normal((1, 3, 16, 16))
    curve = spectral_density(feat)
    return abs(curve.energy - np.sum(feat**2)) <= 1e-5 * np.sum(feat**2)


def _convlstm_zero() -> bool:
    cfg = ModelConfig(stages=1, channels=2, hsm="none", clm="lstm")
    params = zero_weights(init_params(cfg, seed=0, dtype=np.float64))
    rng = np.random.default_rng(7)
    s, h0, c0 = (T.Tensor(rng.standard_normal((1, 2, 4, 4))) for _ in range(3))
    h, c = conv_lstm_cell(s, h0, c0, params.stages[0].lstm)
    return np.array_equal(c.data, 0.5 * c0.data) and np.array_equal(h.data, 0.5 * np.tanh(0.5 * c0.data))


def _model_grad() -> bool:
    cfg = ModelConfig(stages=2, channels=2, hsm="rb2", clm="lstm", ratio=0.25, block=9)
    op = build_gaussian_operator(0.25, 81, seed=0, dtype=np.float64)
    params = init_params(cfg, seed=0, dtype=np.float64)
    x = T.Tensor(np.random.default_rng(8).random((1, 1, 9, 9)))
    y = op.measure(x)
    f = lambda: T.l1_mean(model_forward(y, op, params, cfg)[0], x)  # noqa: E731
    return T.grad_check(f, list(params.named_tensors().values()), coords=4).passed


CHECKS: dict[str, Callable[[], bool]] = {
    "conv2d vs loop oracle": _conv_oracle,
    "primitive gradients": _primitive_grads,
    "gaussian operator": _operator,
    "mri operator": _mri,
    "block roundtrip": _blocks,
    "psnr/ssim": _metrics,
    "spectral parseval": _spectrum,
    "convlstm zero weights": _convlstm_zero,
    "end-to-end gradient": _model_grad,
}


def run(verbose: bool = True) -> tuple[int, int]:
    passed = failed = 0
    with T.precision("float64"):
        for name, check in CHECKS.items():
            t0 = time.perf_counter()
            try:
                ok = bool(check())
                detail = ""
            except Exception as exc:  # a crashing check counts as a failure
                ok, detail = False, f" ({type(exc).__name__}: {exc})"
            passed += ok
            failed += not ok
            if verbose:
                print(f"{'PASS' if ok else 'FAIL'}  {name}  [{time.perf_counter() - t0:.2f}s]{detail}")
    if verbose:
        print(f"selftest: {passed} passed, {failed} failed")
    return passed, failed
