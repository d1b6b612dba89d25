"""Bilinear resampling of planar (band, row, col) stacks at arbitrary points."""

from __future__ import annotations

import numpy as np


def bilinear_sample(data: np.ndarray, x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None):
    """Sample ``data`` (B, H, W) at float pixel coordinates ``x``, ``y``.

    Returns ``(values, inside, valid)``. ``values`` has shape (B,) + x.shape
    and is meaningless where ``inside`` is False. ``inside`` marks points in
    the closed pixel-center rectangle [0, W-1] x [0, H-1]. ``valid`` (shape
    (Bm,) + x.shape where Bm is the mask band count) is ``inside`` and
    every neighbor carrying non-zero bilinear weight valid under ``mask``.
    """
    data = np.asarray(data)
    _, h, w = data.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (x >= 0.0) & (x <= w - 1) & (y >= 0.0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    src = data.astype(np.float64, copy=False)
    values = (
        src[:, y0, x0] * w00
        + src[:, y0, x1] * w01
        + src[:, y1, x0] * w10
        + src[:, y1, x1] * w11
    )
    if mask is None:
        valid = inside[None]
    else:
        m = np.asarray(mask, dtype=bool)
        valid = np.broadcast_to(inside, (m.shape[0],) + inside.shape).copy()
        for wgt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
            valid &= m[:, yy, xx] | (wgt == 0.0)
    return values, inside, valid


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates (x, y), each of shape (height, width)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)
