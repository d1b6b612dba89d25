"""LED response model, 299->8 band projection and spectral-angle scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .hypercube import CubeFormatError, SpectralCube, ValidityMask

# Gaussian support is cut at this many sigmas; beyond it the LED emits nothing.
SUPPORT_SIGMAS = 4.0


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class LedBandSpec:
    name: str
    lambda_peak: float
    delta_lambda: float
    forward_voltage: float | None = None
    max_current_ma: float | None = None

    def __post_init__(self):
        if not (self.lambda_peak > 0 and math.isfinite(self.lambda_peak)):
            raise SpectralError(f"{self.name}: lambda_peak must be positive")
        if not (self.delta_lambda > 0 and math.isfinite(self.delta_lambda)):
            raise SpectralError(f"{self.name}: delta_lambda must be positive")

    @property
    def sigma(self) -> float:
        # delta_lambda is the half width at half maximum
        return self.delta_lambda / math.sqrt(2.0 * math.log(2.0))


DEFAULT_LEDS = (
    LedBandSpec("ultraviolet", 395.0, 10.0, 3.3, 60.0),
    LedBandSpec("blue", 466.0, 15.0, 2.9, 30.0),
    LedBandSpec("green", 520.0, 15.0, 2.9, 30.0),
    LedBandSpec("yellow_green", 573.0, 20.0, 2.4, 25.0),
    LedBandSpec("yellow", 585.0, 20.0, 2.4, 25.0),
    LedBandSpec("orange", 600.0, 20.0, 2.4, 25.0),
    LedBandSpec("red", 660.0, 17.0, 2.1, 100.0),
    LedBandSpec("infrared", 940.0, 40.0, 1.3, 200.0),
)


def parse_led_table(text: str) -> list[LedBandSpec]:
    """Parse ``name lambda_peak_nm delta_lambda_nm [vf imax]`` lines."""
    specs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 5):
            raise SpectralError(f"LED table line {lineno}: expected 3 or 5 fields, got {len(parts)}")
        try:
            nums = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise SpectralError(f"LED table line {lineno}: {exc}") from exc
        specs.append(LedBandSpec(parts[0], *nums))
    if not specs:
        raise SpectralError("LED table is empty")
    return specs


def load_led_table(path=None) -> list[LedBandSpec]:
    if path is None:
        text = resources.files("spectraforge").joinpath("data/leds.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_led_table(text)


def led_weights_unnormalized(spec: LedBandSpec, wavelengths) -> np.ndarray:
    wl = np.asarray(wavelengths, dtype=np.float64)
    d = wl - spec.lambda_peak
    w = np.exp(-(d * d) / (2.0 * spec.sigma**2))
    w[np.abs(d) > SUPPORT_SIGMAS * spec.sigma] = 0.0
    return w


def led_response(spec: LedBandSpec, wavelengths) -> np.ndarray:
    """Normalized Gaussian emission weights of one LED sampled on a grid."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    if wl.size == 0:
        raise SpectralError("empty wavelength grid")
    w = led_weights_unnormalized(spec, wl)
    total = w.sum()
    if total <= 0.0:
        raise SpectralError(
            f"LED {spec.name} ({spec.lambda_peak:g} nm) has no support on grid "
            f"[{wl.min():g}, {wl.max():g}] nm"
        )
    return w / total


@dataclass(frozen=True)
class ProjectionMatrix:
    weights: np.ndarray  # (n_leds, n_grid)
    wavelengths: np.ndarray  # source grid
    peaks: np.ndarray  # output band wavelengths
    names: tuple[str, ...] = ()

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


def build_projection(specs, wavelengths, mode: str = "gaussian") -> ProjectionMatrix:
    """Stack LED responses into a row-stochastic matrix, rows by ascending peak.

    ``mode="nearest"`` picks the single grid band closest to each peak
    instead of weighting by the emission curve.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    specs = sorted(specs, key=lambda s: s.lambda_peak)
    if mode == "gaussian":
        rows = [led_response(s, wl) for s in specs]
    elif mode == "nearest":
        rows = []
        for s in specs:
            led_response(s, wl)  # same support rule as the gaussian path
            r = np.zeros_like(wl)
            r[int(np.argmin(np.abs(wl - s.lambda_peak)))] = 1.0
            rows.append(r)
    else:
        raise SpectralError(f"unknown projection mode {mode!r}")
    peaks = np.array([s.lambda_peak for s in specs], dtype=np.float64)
    return ProjectionMatrix(np.stack(rows), wl.copy(), peaks, tuple(s.name for s in specs))


def project_cube(gt: SpectralCube, proj: ProjectionMatrix) -> SpectralCube:
    if gt.bands != proj.weights.shape[1]:
        raise SpectralError(
            f"cube has {gt.bands} bands, projection expects {proj.weights.shape[1]}"
        )
    if not np.allclose(gt.wavelengths, proj.wavelengths, rtol=0.0, atol=1e-6):
        raise SpectralError("cube wavelength grid differs from the projection's source grid")
    if np.any(np.diff(proj.peaks) <= 0):
        raise SpectralError("LED peaks must be distinct to label projected bands")
    flat = gt.data.reshape(gt.bands, -1).astype(np.float64)
    out = (proj.weights @ flat).reshape(proj.n_out, gt.height, gt.width)
    if not gt.raw:
        # rows sum to 1, so this only trims rounding past the ends
        out = np.clip(out, 0.0, 1.0)
    return SpectralCube(out.astype(np.float32), proj.peaks, gt.raw)


def spectral_angle_array(gt: np.ndarray, pred: np.ndarray, axis: int = 0) -> np.ndarray:
    """Normalized spectral angle between spectra along ``axis``.

    Returns arccos(cos)/(pi/2) in [0, 1]; 0 when both spectra are zero,
    1 when exactly one is.
    """
    a = np.asarray(gt, dtype=np.float64)
    b = np.asarray(pred, dtype=np.float64)
    if a.shape != b.shape:
        raise SpectralError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(b * b, axis=axis, keepdims=True))
    za, zb = na == 0, nb == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        ua = np.where(za, 0.0, a / np.where(za, 1.0, na))
        ub = np.where(zb, 0.0, b / np.where(zb, 1.0, nb))
    # half-angle form of arccos(u.v): exact for equal or rescaled spectra
    diff = np.sqrt(np.sum((ua - ub) ** 2, axis=axis))
    summ = np.sqrt(np.sum((ua + ub) ** 2, axis=axis))
    err = 2.0 * np.arctan2(diff, summ) / (np.pi / 2)
    za, zb = np.squeeze(za, axis), np.squeeze(zb, axis)
    err = np.where(za & zb, 0.0, np.where(za ^ zb, 1.0, err))
    return np.clip(err, 0.0, 1.0)


def spectral_angle(gt: SpectralCube, pred: SpectralCube) -> np.ndarray:
    """Per-pixel normalized angular error map, shape (height, width)."""
    if gt.data.shape != pred.data.shape:
        raise SpectralError(f"cube shape mismatch {gt.shape} vs {pred.shape}")
    return spectral_angle_array(gt.data, pred.data, axis=0)


@dataclass(frozen=True)
class ClassStats:
    mean: float | None
    std: float | None
    n: int

    @property
    def defined(self) -> bool:
        return self.n > 0

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n, "defined": self.defined}


def _stats(values: np.ndarray) -> ClassStats:
    if values.size == 0:
        return ClassStats(None, None, 0)
    return ClassStats(float(values.mean()), float(values.std()), int(values.size))


def class_stats(err: np.ndarray, segmentation) -> dict[str, ClassStats]:
    """Mean/std/count of the error map split into root (True) and soil pixels."""
    err = np.asarray(err, dtype=np.float64)
    if isinstance(segmentation, ValidityMask):
        if segmentation.bands != 1:
            raise CubeFormatError("segmentation must be a single-band mask")
        seg = segmentation.bits[0]
    else:
        seg = np.asarray(segmentation, dtype=bool)
    if seg.shape != err.shape:
        raise SpectralError(f"segmentation {seg.shape} does not match error map {err.shape}")
    return {"root": _stats(err[seg]), "soil": _stats(err[~seg])}
