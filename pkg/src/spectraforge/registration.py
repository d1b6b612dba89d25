"""Register our-camera frames into the reference HSI frame.

Downscale to the reference pixel density, then find the integer placement
maximizing masked normalized cross-correlation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .hypercube import SpectralCube, ValidityMask

log = logging.getLogger(__name__)

MATCH_WAVELENGTH_NM = 660.0
MIN_OUTPUT = 8


class RegistrationError(ValueError):
    pass


class CropClippedError(RegistrationError):
    """Best placement touches the reference border; the true crop may extend past it."""


@dataclass(frozen=True)
class MatchResult:
    offset: tuple[int, int]  # (row, col) in reference pixels
    score: float
    scale: float
    crop: tuple[int, int, int, int]  # row0, col0, height, width
    at_border: bool = False

    def as_dict(self) -> dict:
        return {
            "offset": list(self.offset),
            "score": self.score,
            "scale": self.scale,
            "crop": list(self.crop),
            "at_border": self.at_border,
        }


def area_weights(n_in: int, factor: float) -> np.ndarray:
    """(n_out, n_in) box-filter matrix with fractional pixel coverage.

    Output pixel i covers input interval [i*factor, (i+1)*factor).
    """
    n_out = int(np.floor(n_in / factor + 1e-9))
    edges = np.arange(n_out + 1, dtype=np.float64) * factor
    lo = edges[:-1, None]
    hi = edges[1:, None]
    px = np.arange(n_in, dtype=np.float64)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1.0) - np.maximum(lo, px), 0.0, None)
    return overlap / factor


def downscale_image(img: np.ndarray, factor: float) -> np.ndarray:
    """Area-average a (..., H, W) array by ``factor``."""
    if not factor >= 1.0:
        raise RegistrationError(f"downscale factor must be >= 1, got {factor}")
    img = np.asarray(img, dtype=np.float64)
    ay = area_weights(img.shape[-2], factor)
    ax = area_weights(img.shape[-1], factor)
    return ay @ img @ ax.T


def downscale_to_density(cube: SpectralCube, factor: float) -> SpectralCube:
    h, w = cube.height, cube.width
    oh, ow = int(np.floor(h / factor + 1e-9)), int(np.floor(w / factor + 1e-9))
    if oh < MIN_OUTPUT or ow < MIN_OUTPUT:
        raise RegistrationError(
            f"factor {factor} shrinks {h}x{w} to {oh}x{ow}, below {MIN_OUTPUT}x{MIN_OUTPUT}"
        )
    out = downscale_image(cube.data, factor)
    if not cube.raw:
        out = np.clip(out, 0.0, 1.0)
    return cube.replace(data=out.astype(np.float32))


def ncc_surface(reference: np.ndarray, template: np.ndarray, template_mask: np.ndarray | None = None) -> np.ndarray:
    """Masked NCC of ``template`` at every full-overlap placement in ``reference``.

    Mean and variance of each reference window are taken over the
    template's valid pixels only. Windows with zero variance score 0.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tpl = np.asarray(template, dtype=np.float64)
    if ref.ndim != 2 or tpl.ndim != 2:
        raise RegistrationError("ncc expects 2-D images")
    th, tw = tpl.shape
    if th > ref.shape[0] or tw > ref.shape[1]:
        raise RegistrationError(f"template {tpl.shape} larger than reference {ref.shape}")
    m = np.ones(tpl.shape, dtype=bool) if template_mask is None else np.asarray(template_mask, dtype=bool)
    if m.shape != tpl.shape:
        raise RegistrationError("template mask shape differs from template")
    n = int(m.sum())
    if n < 2:
        raise RegistrationError("template has fewer than two valid pixels")
    wm = m.astype(np.float64)
    tc = np.where(m, tpl - tpl[m].mean(), 0.0)
    tnorm = np.sqrt(np.sum(tc * tc))
    if not tnorm > 1e-12 * max(1.0, np.abs(tpl[m]).max()):
        raise RegistrationError("template has zero variance over its valid pixels")
    windows = sliding_window_view(ref, (th, tw))
    nr, nc = windows.shape[:2]
    out = np.zeros((nr, nc))
    for r in range(nr):
        win = windows[r]  # (nc, th, tw) view
        means = np.tensordot(win, wm, axes=([1, 2], [0, 1])) / n
        cen = (win - means[:, None, None]) * wm
        num = np.tensordot(cen, tc, axes=([1, 2], [0, 1]))
        den = np.sqrt(np.einsum("kij,kij->k", cen, cen)) * tnorm
        with np.errstate(invalid="ignore", divide="ignore"):
            out[r] = np.where(den > 0, num / den, 0.0)
    return out


def ncc_match(reference: np.ndarray, template: np.ndarray, template_mask=None, scale: float = 1.0) -> MatchResult:
    """Best integer placement; ties go to the first in row-major order."""
    if isinstance(template_mask, ValidityMask):
        template_mask = template_mask.spatial()
    surf = ncc_surface(reference, template, template_mask)
    idx = int(np.argmax(surf))
    row, col = divmod(idx, surf.shape[1])
    th, tw = np.shape(template)
    at_border = row == 0 or col == 0 or row == surf.shape[0] - 1 or col == surf.shape[1] - 1
    return MatchResult((row, col), float(surf[row, col]), float(scale), (row, col, th, tw), bool(at_border))


def nearest_band(cube: SpectralCube, wavelength: float) -> int:
    return int(np.argmin(np.abs(cube.wavelengths - wavelength)))


@dataclass
class PairedSample:
    """``input`` is the full-resolution cube; ``downscaled`` is what was matched."""

    input: SpectralCube
    ground_truth: SpectralCube
    match: MatchResult
    mismatch: np.ndarray
    downscaled: SpectralCube
    template_mask: ValidityMask | None = None

    def mismatch_stats(self) -> dict:
        m = self.mismatch
        return {"mean": float(m.mean()), "max": float(m.max()), "rms": float(np.sqrt(np.mean(m * m)))}


def pair_samples(
    our_cube: SpectralCube,
    ref_cube: SpectralCube,
    factor: float,
    band_for_match: int | None = None,
    our_mask: ValidityMask | None = None,
    multi_band: bool = False,
    allow_border: bool = True,
) -> PairedSample:
    """Locate ``our_cube`` inside ``ref_cube`` and cut the matching ground truth.

    ``band_for_match`` indexes ``our_cube``; the reference band with the
    nearest wavelength is used against it. Defaults to the band nearest
    660 nm. With ``multi_band`` the NCC surfaces of every our-band are
    summed against their nearest reference bands instead.
    """
    if band_for_match is None:
        band_for_match = nearest_band(our_cube, MATCH_WAVELENGTH_NM)
    if not 0 <= band_for_match < our_cube.bands:
        raise RegistrationError(f"band {band_for_match} out of range for {our_cube.bands}-band cube")
    small = downscale_to_density(our_cube, factor) if factor != 1 else our_cube
    tmask = None
    if our_mask is not None:
        our_mask.check_matches(our_cube)
        mdown = downscale_image(our_mask.spatial().astype(np.float64), factor) if factor != 1 else our_mask.spatial()
        tmask = np.asarray(mdown) >= 1.0 - 1e-9

    if multi_band:
        total = None
        for b in range(small.bands):
            rb = nearest_band(ref_cube, float(small.wavelengths[b]))
            try:
                s = ncc_surface(ref_cube.data[rb], small.data[b], tmask)
            except RegistrationError:
                continue
            total = s if total is None else total + s
        if total is None:
            raise RegistrationError("no band has usable variance for matching")
        idx = int(np.argmax(total))
        row, col = divmod(idx, total.shape[1])
        score = float(total[row, col] / small.bands)
        at_border = row == 0 or col == 0 or row == total.shape[0] - 1 or col == total.shape[1] - 1
        match = MatchResult((row, col), score, float(factor), (row, col, small.height, small.width), bool(at_border))
    else:
        rb = nearest_band(ref_cube, float(our_cube.wavelengths[band_for_match]))
        match = ncc_match(ref_cube.data[rb], small.data[band_for_match], tmask, scale=factor)

    if match.at_border and not allow_border:
        raise CropClippedError(
            f"match at {match.offset} touches the reference border; crop may be clipped"
        )
    r0, c0, h, w = match.crop
    gt = ref_cube.replace(data=ref_cube.data[:, r0:r0 + h, c0:c0 + w])
    rb = nearest_band(ref_cube, float(our_cube.wavelengths[band_for_match]))
    mismatch = np.abs(gt.data[rb].astype(np.float64) - small.data[band_for_match])
    log.info("matched at %s score %.4f", match.offset, match.score)
    tm = ValidityMask(tmask) if tmask is not None else None
    return PairedSample(our_cube, gt, match, mismatch, small, tm)
