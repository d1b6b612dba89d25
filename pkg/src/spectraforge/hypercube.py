"""Spectral cube and validity-mask containers plus their on-disk formats.

A cube lives on disk as two files: ``name.hsc`` holds the raw little-endian
float32 payload in band-major planar order (band, row, column) and
``name.hsc.json`` holds the header.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

HEADER_SUFFIX = ".json"
HEADER_KEYS = ("width", "height", "bands", "wavelengths_nm", "raw", "byte_order", "value_type")


class CubeFormatError(ValueError):
    """A cube, mask or header violates the container invariants."""


def default_wavelengths(bands: int = 299, start: float = 400.0, stop: float = 1000.0) -> np.ndarray:
    """Evenly spaced wavelength grid in nm, both ends inclusive."""
    if bands < 1:
        raise CubeFormatError("need at least one band")
    if bands == 1:
        return np.array([start], dtype=np.float64)
    return np.linspace(start, stop, bands, dtype=np.float64)


def _check_wavelengths(wl: np.ndarray, bands: int) -> None:
    if wl.ndim != 1 or wl.shape[0] != bands:
        raise CubeFormatError(f"expected {bands} wavelengths, got shape {wl.shape}")
    if not np.all(np.isfinite(wl)) or np.any(wl <= 0):
        raise CubeFormatError("wavelengths must be finite and positive")
    if bands > 1 and np.any(np.diff(wl) <= 0):
        raise CubeFormatError("wavelengths must be strictly increasing")


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """H x W x B reflectance volume.

    ``data`` is stored planar as ``(bands, height, width)`` float32 and is
    made read-only on construction.
    """

    data: np.ndarray
    wavelengths: np.ndarray
    raw: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise CubeFormatError(f"cube data must be 3-D (bands, height, width), got {data.shape}")
        wl = np.array(self.wavelengths, dtype=np.float64, copy=True).reshape(-1)
        _check_wavelengths(wl, data.shape[0])
        if not np.all(np.isfinite(data)):
            raise CubeFormatError("cube contains non-finite values")
        if not self.raw and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise CubeFormatError("values outside [0, 1] require raw=True")
        data.setflags(write=False)
        wl.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "wavelengths", wl)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """(height, width, bands), the order used when talking about cubes."""
        return (self.height, self.width, self.bands)

    def replace(self, data=None, wavelengths=None, raw=None) -> "SpectralCube":
        return SpectralCube(
            self.data if data is None else data,
            self.wavelengths if wavelengths is None else wavelengths,
            self.raw if raw is None else raw,
        )

    def header(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "bands": self.bands,
            "wavelengths_nm": [float(w) for w in self.wavelengths],
            "raw": bool(self.raw),
            "byte_order": "LE",
            "value_type": "f32",
        }

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.raw == other.raw
            and self.data.shape == other.data.shape
            and np.array_equal(self.wavelengths, other.wavelengths)
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ValidityMask:
    """Boolean map of trustworthy pixels, shape ``(bands, height, width)``.

    ``bands`` is 1 for a spatial-only mask.
    """

    bits: np.ndarray = field()

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim == 2:
            bits = bits[None]
        if bits.ndim != 3:
            raise CubeFormatError(f"mask must be 2-D or 3-D, got {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def all_valid(cls, height: int, width: int, bands: int = 1) -> "ValidityMask":
        return cls(np.ones((bands, height, width), dtype=bool))

    @property
    def bands(self) -> int:
        return self.bits.shape[0]

    @property
    def height(self) -> int:
        return self.bits.shape[1]

    @property
    def width(self) -> int:
        return self.bits.shape[2]

    def check_matches(self, cube: SpectralCube) -> None:
        if (self.height, self.width) != (cube.height, cube.width):
            raise CubeFormatError(
                f"mask {self.height}x{self.width} does not match cube {cube.height}x{cube.width}"
            )
        if self.bands not in (1, cube.bands):
            raise CubeFormatError(f"mask has {self.bands} bands, cube has {cube.bands}")

    def spatial(self) -> np.ndarray:
        """Pixels valid in every band, shape (height, width)."""
        return self.bits.all(axis=0)

    def expand(self, bands: int) -> np.ndarray:
        return np.broadcast_to(self.bits, (bands, self.height, self.width))

    def __eq__(self, other):
        if not isinstance(other, ValidityMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + HEADER_SUFFIX)


def _parse_header(hdr: dict) -> tuple[int, int, int, np.ndarray, bool]:
    if not isinstance(hdr, dict):
        raise CubeFormatError("header must be a JSON object")
    missing = [k for k in HEADER_KEYS if k not in hdr]
    if missing:
        raise CubeFormatError(f"header missing fields: {missing}")
    extra = sorted(set(hdr) - set(HEADER_KEYS))
    if extra:
        raise CubeFormatError(f"unexpected header fields: {extra}")
    if hdr["byte_order"] != "LE" or hdr["value_type"] != "f32":
        raise CubeFormatError("only byte_order LE and value_type f32 are supported")
    dims = []
    for key in ("width", "height", "bands"):
        val = hdr[key]
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            raise CubeFormatError(f"header field {key!r} must be a positive integer")
        dims.append(val)
    if not isinstance(hdr["raw"], bool):
        raise CubeFormatError("header field 'raw' must be a boolean")
    wl = hdr["wavelengths_nm"]
    if not isinstance(wl, list) or not all(
        isinstance(w, (int, float)) and not isinstance(w, bool) for w in wl
    ):
        raise CubeFormatError("wavelengths_nm must be a list of numbers")
    wl = np.asarray(wl, dtype=np.float64)
    width, height, bands = dims
    _check_wavelengths(wl, bands)
    return width, height, bands, wl, hdr["raw"]


def load_cube(path) -> SpectralCube:
    """Read a cube from ``path`` and its ``.json`` sidecar."""
    path = Path(path)
    hpath = header_path(path)
    try:
        with open(hpath, "r", encoding="utf-8") as fh:
            hdr = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"corrupt header {hpath}: {exc}") from exc
    width, height, bands, wl, raw = _parse_header(hdr)
    payload = path.read_bytes()
    expected = width * height * bands * 4
    if len(payload) != expected:
        raise CubeFormatError(
            f"payload length mismatch: header implies {expected} bytes, file has {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width)
    return SpectralCube(data, wl, raw)


def save_cube(cube: SpectralCube, path) -> None:
    """Write ``cube`` to ``path`` plus header sidecar.

    The cube is re-validated before anything touches the disk.
    """
    data = np.asarray(cube.data)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError("refusing to write non-finite values")
    if not cube.raw and data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise CubeFormatError("values outside [0, 1] require raw=True")
    path = Path(path)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    path.write_bytes(payload)
    with open(header_path(path), "w", encoding="utf-8") as fh:
        json.dump(cube.header(), fh, indent=1)


def band_slice(cube: SpectralCube, b: int) -> np.ndarray:
    if not 0 <= b < cube.bands:
        raise IndexError(f"band {b} out of range for {cube.bands}-band cube")
    return cube.data[b].copy()


def stack_bands(images, wavelengths, raw: bool = False) -> SpectralCube:
    """Inverse of slicing every band."""
    return SpectralCube(np.stack([np.asarray(im, dtype=np.float32) for im in images]), wavelengths, raw)


def to_uint8(values: np.ndarray) -> np.ndarray:
    # round half up after clamping
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def export_band_png(cube: SpectralCube, b: int, path) -> None:
    img = to_uint8(band_slice(cube, b))
    Image.fromarray(img, mode="L").save(path, format="PNG")


def save_mask_png(mask: ValidityMask, path) -> None:
    """Write a mask as 0/255 8-bit PNG.

    A single-band mask goes to ``path`` itself; a per-band mask goes to
    ``path/band_000.png`` and so on.
    """
    path = Path(path)
    if mask.bands == 1:
        Image.fromarray(mask.bits[0].astype(np.uint8) * 255, mode="L").save(path, format="PNG")
        return
    os.makedirs(path, exist_ok=True)
    for b in range(mask.bands):
        Image.fromarray(mask.bits[b].astype(np.uint8) * 255, mode="L").save(
            path / f"band_{b:03d}.png", format="PNG"
        )


def _read_png_bits(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise CubeFormatError(f"{path}: mask PNG must be single-channel")
    bad = (arr != 0) & (arr != 255)
    if bad.any():
        raise CubeFormatError(f"{path}: mask PNG values must be 0 or 255")
    return arr == 255


def load_mask_png(path) -> ValidityMask:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("band_*.png"))
        if not files:
            raise CubeFormatError(f"{path}: no band_*.png files")
        return ValidityMask(np.stack([_read_png_bits(f) for f in files]))
    return ValidityMask(_read_png_bits(path))
