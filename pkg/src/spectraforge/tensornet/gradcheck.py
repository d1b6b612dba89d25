"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, _make


def _objective(out: Tensor, weights: np.ndarray | None) -> float:
    d = out.data.astype(np.float64)
    return float(d.sum() if weights is None else (d * weights).sum())


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int,
                 weights: np.ndarray | None = None, eps: float = 1e-3) -> np.ndarray:
    """d f / d inputs[index] by central differences, f = sum(fn(*inputs) * weights)."""
    x = inputs[index]
    base = x.data
    g = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        vals = []
        for sgn in (1.0, -1.0):
            pert = flat.copy()
            pert[k] = orig + base.dtype.type(sgn * eps)
            x.data = pert.reshape(base.shape)
            vals.append(_objective(fn(*inputs), weights))
        # use the step actually representable in the input dtype
        step = float(base.dtype.type(orig + eps)) - float(base.dtype.type(orig - eps))
        g.reshape(-1)[k] = (vals[0] - vals[1]) / step
    x.data = base
    return g


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
                  weights: np.ndarray | None = None) -> list[np.ndarray | None]:
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    w = np.ones_like(out.data) if weights is None else weights.astype(out.data.dtype)
    if out.data.size == 1:
        loss = out * float(w.reshape(-1)[0])
    else:
        loss = _make(np.asarray((out.data * w).sum(), dtype=out.data.dtype), (out,),
                     lambda g: (g * w,), "weighted_sum")
    loss.backward()
    return [None if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    denom = max(na, nb)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator | None = None,
              eps: float = 1e-3) -> list[float]:
    """Relative error of the analytic gradient for each input with ``requires_grad``.

    Non-scalar outputs are reduced with random weights so every output
    element contributes a distinct direction.
    """
    probe = fn(*inputs)
    weights = None
    if probe.data.size > 1:
        rng = rng or np.random.default_rng(0)
        weights = rng.uniform(0.5, 1.5, size=probe.shape)
    analytic = analytic_grad(fn, inputs, weights)
    errs = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        num = numeric_grad(fn, inputs, i, weights, eps)
        errs.append(rel_error(analytic[i], num))
    return errs
