"""LED specular-spot detection (Otsu per band) and cross-band inpainting."""

from __future__ import annotations

import numpy as np

from .hypercube import SpectralCube, ValidityMask

N_LEVELS = 256
SPOT_RATIO = 2.0


class DegenerateHistogram(ValueError):
    """Fewer than two populated levels; there is nothing to split."""


class InpaintError(ValueError):
    pass


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] reflectance onto 256 equal-width bins."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.minimum((v * N_LEVELS).astype(np.int64), N_LEVELS - 1)


def histogram(values: np.ndarray) -> np.ndarray:
    return np.bincount(quantize(values).ravel(), minlength=N_LEVELS)


def otsu_threshold(hist) -> int:
    """Level t maximizing between-class variance of {<= t} vs {> t}.

    Scores are compared as exact integer fractions, so equal scores really
    are equal and the lowest maximizing t wins.
    """
    counts = [int(c) for c in np.asarray(hist).ravel()]
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    if sum(1 for c in counts if c > 0) < 2:
        raise DegenerateHistogram("histogram has fewer than two populated levels")
    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(len(counts) - 1):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_B^2 * N^2 = (S*n0 - N*s0)^2 / (n0*n1)
        num = (total_sum * n0 - total * s0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def spot_mask(cube: SpectralCube, spot_ratio: float = SPOT_RATIO) -> ValidityMask:
    """Per-band mask with LED spot pixels marked invalid.

    A band is treated as spot-free when it is constant or when the bright
    Otsu class is not at least ``spot_ratio`` times brighter on average.
    """
    bits = np.ones(cube.data.shape, dtype=bool)
    for b in range(cube.bands):
        band = cube.data[b].astype(np.float64)
        q = quantize(band)
        try:
            t = otsu_threshold(np.bincount(q.ravel(), minlength=N_LEVELS))
        except DegenerateHistogram:
            continue
        above = q > t
        hi = band[above].mean()
        lo = band[~above].mean()
        if hi >= spot_ratio * lo:
            bits[b] = ~above
    return ValidityMask(bits)


def inpaint_spectral(cube: SpectralCube, mask: ValidityMask) -> SpectralCube:
    """Replace masked entries by linear interpolation over wavelength.

    Each invalid (x, y, b) takes the straight line between the nearest valid
    bands below and above; with only one side available it copies that
    side's value.
    """
    mask.check_matches(cube)
    valid = mask.expand(cube.bands)
    if valid.all():
        return cube
    if not valid.any(axis=0).all():
        n = int((~valid.any(axis=0)).sum())
        raise InpaintError(f"{n} pixel(s) have no valid band to interpolate from")
    nb = cube.bands
    data = cube.data.astype(np.float64)
    wl = cube.wavelengths
    band_idx = np.arange(nb)[:, None, None]
    # index of the nearest valid band at or below / at or above each band
    below = np.where(valid, band_idx, -1)
    below = np.maximum.accumulate(below, axis=0)
    above = np.where(valid, band_idx, nb)
    above = np.minimum.accumulate(above[::-1], axis=0)[::-1]
    has_lo = below >= 0
    has_hi = above < nb
    lo = np.clip(below, 0, nb - 1)
    hi = np.clip(above, 0, nb - 1)
    v_lo = np.take_along_axis(data, lo, axis=0)
    v_hi = np.take_along_axis(data, hi, axis=0)
    w_lo, w_hi = wl[lo], wl[hi]
    here = np.broadcast_to(wl[:, None, None], data.shape)
    span = np.where(w_hi > w_lo, w_hi - w_lo, 1.0)
    frac = (here - w_lo) / span
    interp = v_lo + frac * (v_hi - v_lo)
    fill = np.where(has_lo & has_hi, interp, np.where(has_lo, v_lo, v_hi))
    out = np.where(valid, data, fill)
    return cube.replace(data=out.astype(np.float32))
