"""Seeded random affine augmentation with mean fill and validity tracking."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from .hypercube import SpectralCube, ValidityMask
from .sampling import bilinear_sample, pixel_grid

# (low, high) per parameter, drawn in this order
RANGES = {
    "tx": (-0.20, 0.20),
    "ty": (-0.20, 0.20),
    "scale": (0.80, 1.60),
    "rotate": (-30.0, 30.0),
    "shear": (-5.0, 5.0),
}


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AffineParams:
    tx: float = 0.0  # fraction of width
    ty: float = 0.0  # fraction of height
    scale: float = 1.0
    rotate: float = 0.0  # degrees
    shear: float = 0.0  # degrees

    def in_range(self, ranges=RANGES) -> bool:
        return all(lo <= getattr(self, k) <= hi for k, (lo, hi) in ranges.items())

    def as_tuple(self) -> tuple:
        return astuple(self)


IDENTITY = AffineParams()


def truncated_normal(rng: np.random.Generator, low: float, high: float) -> float:
    """Normal centered on the interval with sigma = width / 4, redrawn until inside."""
    mid = 0.5 * (low + high)
    sigma = 0.25 * (high - low)
    while True:
        v = rng.normal(mid, sigma)
        if low <= v <= high:
            return float(v)


def sample_affine(rng: np.random.Generator, ranges=RANGES) -> AffineParams:
    return AffineParams(**{k: truncated_normal(rng, lo, hi) for k, (lo, hi) in ranges.items()})


def _t(dx, dy):
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def to_matrix(p: AffineParams, width: int, height: int) -> np.ndarray:
    """Forward 2x3 map (source pixel -> output pixel).

    Translate * C * Rotate * Scale * Shear * C^-1, with C moving the origin
    to the image center.
    """
    if width <= 0 or height <= 0:
        raise AugmentError("image dims must be positive")
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    th = math.radians(p.rotate)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    scl = np.diag([p.scale, p.scale, 1.0])
    shr = np.array([[1.0, math.tan(math.radians(p.shear)), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = _t(p.tx * width, p.ty * height) @ _t(cx, cy) @ rot @ scl @ shr @ _t(-cx, -cy)
    return m[:2]


def apply_matrix(m: np.ndarray, x, y):
    m = np.asarray(m, dtype=np.float64)
    return m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2]


def invert_matrix(m: np.ndarray) -> np.ndarray:
    full = np.vstack([np.asarray(m, dtype=np.float64).reshape(2, 3), [0.0, 0.0, 1.0]])
    if abs(np.linalg.det(full[:2, :2])) < 1e-12:
        raise AugmentError("affine matrix is singular")
    return np.linalg.inv(full)[:2]


def warp_array(data: np.ndarray, mask: np.ndarray, m: np.ndarray):
    """Warp a (B, H, W) array and its (Bm, H, W) mask; see :func:`warp`."""
    _, h, w = data.shape
    inv = invert_matrix(m)
    xo, yo = pixel_grid(h, w)
    xs, ys = apply_matrix(inv, xo, yo)
    values, inside, valid = bilinear_sample(data, xs, ys, mask)
    fill = data.astype(np.float64).mean(axis=(1, 2))
    out = np.where(inside[None], values, fill[:, None, None])
    return out, valid


def warp(cube: SpectralCube, mask: ValidityMask | None, m: np.ndarray) -> tuple[SpectralCube, ValidityMask]:
    """Inverse-map bilinear warp.

    Pixels whose source lies outside the cube get the per-band source mean
    and are invalid. Pixels inside stay valid only if every neighbor with
    non-zero bilinear weight was valid.
    """
    if mask is None:
        mask = ValidityMask.all_valid(cube.height, cube.width)
    mask.check_matches(cube)
    out, valid = warp_array(cube.data, mask.bits, m)
    return cube.replace(data=out.astype(np.float32)), ValidityMask(valid)


def _pool_all(bits: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """A coarse pixel is valid only if every fine pixel it covers is."""
    _, h, w = bits.shape
    if h % out_h or w % out_w:
        raise AugmentError(f"cannot pool {h}x{w} onto {out_h}x{out_w}")
    fy, fx = h // out_h, w // out_w
    return bits.reshape(bits.shape[0], out_h, fy, out_w, fx).all(axis=(2, 4))


def augment_pair(
    inp: SpectralCube,
    gt: SpectralCube,
    rng: np.random.Generator | None = None,
    params: AffineParams | None = None,
    input_mask: ValidityMask | None = None,
    gt_mask: ValidityMask | None = None,
    warp_gt: bool = True,
) -> tuple[SpectralCube, SpectralCube, ValidityMask]:
    """Apply one affine draw to a registered (input, ground truth) pair.

    Both cubes cover the same physical area at different pixel densities;
    building the matrix from each cube's own dims yields the same physical
    transform. The returned mask lives at ground-truth resolution.
    """
    if params is None:
        if rng is None:
            raise AugmentError("need rng or explicit params")
        params = sample_affine(rng)
    if inp.width * gt.height != inp.height * gt.width:
        raise AugmentError("input and ground truth must share an aspect ratio")
    m_in = to_matrix(params, inp.width, inp.height)
    inp2, in_valid = warp(inp, input_mask, m_in)
    if warp_gt:
        gt2, gt_valid = warp(gt, gt_mask, to_matrix(params, gt.width, gt.height))
    else:
        gt2 = gt
        gt_valid = gt_mask if gt_mask is not None else ValidityMask.all_valid(gt.height, gt.width)
    pooled = _pool_all(in_valid.bits.all(axis=0, keepdims=True), gt.height, gt.width)
    shared = gt_valid.bits.all(axis=0, keepdims=True) & pooled
    return inp2, gt2, ValidityMask(shared)
