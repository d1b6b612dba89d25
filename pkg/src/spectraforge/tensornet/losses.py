"""Masked reconstruction losses with hand-written gradients.

Loss values are float64 scalars; gradients keep the prediction dtype.

All losses take ``pred`` as a Tensor of shape (N, B, H, W); ``gt`` is an
array or Tensor of the same shape and ``mask`` a boolean array that
broadcasts to it (typically (N, 1, H, W)). Means run over valid entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make, weighted_sum


class LossError(ValueError):
    pass


def _arrays(pred: Tensor, gt, mask):
    p = pred.data
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=p.dtype)
    if g.shape != p.shape:
        raise LossError(f"pred {p.shape} and gt {g.shape} differ")
    m = _mask(p, mask)
    return p, g, m


def _mask(p: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.ones(p.shape, dtype=bool)
    try:
        return np.broadcast_to(np.asarray(mask, dtype=bool), p.shape)
    except ValueError as exc:
        raise LossError(f"mask {np.shape(mask)} does not broadcast to {p.shape}") from exc


def _count(m: np.ndarray) -> int:
    n = int(m.sum())
    if n == 0:
        raise LossError("mask selects no elements")
    return n


def _scalar(val: float, pred: Tensor, grad: np.ndarray, name: str) -> Tensor:
    """Scalar loss node; the value stays float64 so small changes stay visible."""
    dt = pred.data.dtype
    return _make(np.asarray(val, dtype=np.float64), (pred,), lambda go: (dt.type(go) * grad,), name)


def loss_mae(pred: Tensor, gt, mask=None) -> Tensor:
    p, g, m = _arrays(pred, gt, mask)
    n = _count(m)
    d = np.where(m, p - g, 0)
    val = np.abs(d).sum(dtype=np.float64) / n
    grad = np.sign(d).astype(p.dtype) / p.dtype.type(n)
    return _scalar(val, pred, grad, "mae")


def loss_mse(pred: Tensor, gt, mask=None) -> Tensor:
    p, g, m = _arrays(pred, gt, mask)
    n = _count(m)
    d = np.where(m, p - g, 0)
    val = (d.astype(np.float64) ** 2).sum() / n
    return _scalar(val, pred, d * p.dtype.type(2.0 / n), "mse")


def loss_smooth_l1(pred: Tensor, gt, mask=None, beta: float = 1.0) -> Tensor:
    """0.5 d^2 / beta for |d| < beta, else |d| - 0.5 beta."""
    if not beta > 0:
        raise LossError("beta must be positive")
    p, g, m = _arrays(pred, gt, mask)
    n = _count(m)
    d = np.where(m, p - g, 0).astype(np.float64)
    ad = np.abs(d)
    quad = ad < beta
    val = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    val = np.where(m, val, 0.0).sum() / n
    grad = (np.where(quad, d / beta, np.sign(d)) / n).astype(p.dtype)
    return _scalar(val, pred, grad, "smooth_l1")


def _shift(a: np.ndarray, axis: int, step: int, fill) -> np.ndarray:
    """out[i] = a[i + step] along ``axis``; positions without a source get ``fill``."""
    out = np.full_like(a, fill)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        src[axis], dst[axis] = slice(step, n), slice(0, n - step)
    else:
        src[axis], dst[axis] = slice(0, n + step), slice(-step, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _unshift_add(acc: np.ndarray, a: np.ndarray, axis: int, step: int) -> None:
    """acc[i + step] += a[i], the adjoint of :func:`_shift`."""
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        src[axis], dst[axis] = slice(0, n - step), slice(step, n)
    else:
        src[axis], dst[axis] = slice(-step, n), slice(0, n + step)
    acc[tuple(dst)] += a[tuple(src)]


def _neighbor_max_loss(pred: Tensor, mask, neighbors, name: str, gt=None) -> Tensor:
    """Mean over elements of max |v - v_nb| across the listed neighbors.

    ``neighbors`` is an ordered list of (axis, step); on ties the earliest
    neighbor in that list takes the gradient. With ``gt`` the penalty is on
    |(v - v_nb) - (g - g_nb)| instead.
    """
    p = pred.data
    m = _mask(p, mask)
    g = None if gt is None else (gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=p.dtype))
    best = np.full(p.shape, -1.0, dtype=p.dtype)
    choice = np.full(p.shape, -1, dtype=np.int8)
    signs = []
    for k, (axis, step) in enumerate(neighbors):
        diff = p - _shift(p, axis, step, 0)
        if g is not None:
            diff = diff - (g - _shift(g, axis, step, 0))
        avail = m & _shift(m, axis, step, False)
        ad = np.abs(diff)
        take = avail & (ad > best)
        best = np.where(take, ad, best)
        choice = np.where(take, np.int8(k), choice)
        signs.append(np.sign(diff).astype(p.dtype))
    counted = choice >= 0
    n = int(counted.sum())
    if n == 0:
        raise LossError(f"{name}: no valid neighbor pairs")
    val = np.where(counted, best, 0).sum(dtype=np.float64) / n

    def backward(go):
        scale = p.dtype.type(go) / p.dtype.type(n)
        dp = np.zeros_like(p)
        for k, (axis, step) in enumerate(neighbors):
            s = np.where(choice == k, signs[k], 0) * scale
            dp += s
            _unshift_add(dp, -s, axis, step)
        return (dp,)

    return _make(np.asarray(val, dtype=np.float64), (pred,), backward, name)


# neighbor order follows the neighbor's position in scan order
PIXEL_NEIGHBORS = ((2, -1), (3, -1), (3, 1), (2, 1))  # up, left, right, down
BAND_NEIGHBORS = ((1, -1), (1, 1))  # previous band, next band


def loss_delta_pixel(pred: Tensor, mask=None, gt=None) -> Tensor:
    if pred.data.ndim != 4:
        raise LossError("delta-pixel expects (N, B, H, W)")
    return _neighbor_max_loss(pred, mask, PIXEL_NEIGHBORS, "delta_pixel", gt)


def loss_delta_bands(pred: Tensor, mask=None, gt=None) -> Tensor:
    if pred.data.ndim != 4:
        raise LossError("delta-bands expects (N, B, H, W)")
    if pred.shape[1] < 2:
        raise LossError("delta-bands needs at least two bands")
    return _neighbor_max_loss(pred, mask, BAND_NEIGHBORS, "delta_bands", gt)


@dataclass(frozen=True)
class LossWeights:
    w_mae: float = 0.0
    w_mse: float = 0.0
    w_dpix: float = 0.0
    w_dband: float = 0.0
    w_smoothl1: float = 0.0

    def __post_init__(self):
        vals = (self.w_mae, self.w_mse, self.w_dpix, self.w_dband, self.w_smoothl1)
        if any(v < 0 for v in vals):
            raise LossError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise LossError("at least one loss weight must be positive")

    def as_dict(self) -> dict:
        return {"mae": self.w_mae, "mse": self.w_mse, "dpix": self.w_dpix,
                "dband": self.w_dband, "smoothl1": self.w_smoothl1}


PRETRAIN_WEIGHTS = LossWeights(1.0, 1.0, 4.0, 4.0, 0.0)
MAIN_WEIGHTS = LossWeights(0.0, 0.0, 0.0, 0.0, 1.0)


def composite_loss(pred: Tensor, gt, mask, w: LossWeights, beta: float = 1.0,
                   delta_vs_gt: bool = False) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the enabled components; also returns each component's value."""
    ref = gt if delta_vs_gt else None
    builders = {
        "mae": (w.w_mae, lambda: loss_mae(pred, gt, mask)),
        "mse": (w.w_mse, lambda: loss_mse(pred, gt, mask)),
        "dpix": (w.w_dpix, lambda: loss_delta_pixel(pred, mask, ref)),
        "dband": (w.w_dband, lambda: loss_delta_bands(pred, mask, ref)),
        "smoothl1": (w.w_smoothl1, lambda: loss_smooth_l1(pred, gt, mask, beta)),
    }
    terms, parts = [], {}
    for key, (weight, build) in builders.items():
        if weight > 0:
            t = build()
            parts[key] = t.item()
            terms.append((weight, t))
    return weighted_sum(terms), parts
