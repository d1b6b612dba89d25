"""Synthetic root/soil scenes and a forward model of the LED camera."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .calibration import DistortionModel, FlatFieldRef, flat_field_correct, half_diagonal, undistort_points
from .hypercube import SpectralCube, ValidityMask, default_wavelengths, save_cube, save_mask_png
from .registration import downscale_image
from .sampling import bilinear_sample, pixel_grid
from .spectral import DEFAULT_LEDS, LedBandSpec, build_projection, project_cube
from .training import DatasetManifest, SampleRecord, split_dataset

log = logging.getLogger(__name__)

RED_EDGE_NM = 700.0


class SimulationError(ValueError):
    pass


def gaussian_spectrum(wl, mean: float, width: float, amplitude: float) -> np.ndarray:
    wl = np.asarray(wl, dtype=np.float64)
    return amplitude * np.exp(-0.5 * ((wl - mean) / width) ** 2)


def root_spectrum(wl, base_mean=560.0, base_width=220.0, base_amp=0.30,
                  edge_amp=0.40, edge_width=15.0, edge_nm=RED_EDGE_NM) -> np.ndarray:
    """Broad hump plus a logistic step rising through ``edge_nm``."""
    wl = np.asarray(wl, dtype=np.float64)
    edge = edge_amp / (1.0 + np.exp(-(wl - edge_nm) / edge_width))
    return gaussian_spectrum(wl, base_mean, base_width, base_amp) + edge


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    bands: int = 299
    wl_start: float = 400.0
    wl_stop: float = 1000.0
    soil_mean_nm: float = 650.0
    soil_width_nm: float = 150.0
    soil_amplitude: float = 0.45
    soil_jitter: float = 0.08  # std of per-pixel multiplicative brightness
    texture_sigma_px: float = 2.0
    texture_strength: float = 0.15
    root_strokes: int = 3
    root_width_px: float = 3.0
    stroke_steps: int = 60
    root_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.bands < 2:
            raise SimulationError("scene needs positive dims and at least two bands")
        if self.root_strokes < 0 or self.root_width_px <= 0:
            raise SimulationError("bad root geometry")

    def wavelengths(self) -> np.ndarray:
        return default_wavelengths(self.bands, self.wl_start, self.wl_stop)


def _stroke_mask(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    xs, ys = pixel_grid(h, w)
    seg = np.zeros((h, w), dtype=bool)
    r2 = (spec.root_width_px / 2.0) ** 2
    for _ in range(spec.root_strokes):
        x, y = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(spec.stroke_steps):
            seg |= (xs - x) ** 2 + (ys - y) ** 2 <= r2
            heading += rng.normal(0.0, 0.25)
            x = float(np.clip(x + np.cos(heading), 0, w - 1))
            y = float(np.clip(y + np.sin(heading), 0, h - 1))
    return seg


def gen_scene(spec: SceneSpec) -> tuple[SpectralCube, np.ndarray]:
    """Reflectance cube and root segmentation (True = root)."""
    rng = np.random.default_rng(spec.seed)
    wl = spec.wavelengths()
    h, w = spec.height, spec.width
    texture = gaussian_filter(rng.standard_normal((h, w)), spec.texture_sigma_px, mode="reflect")
    texture /= max(texture.std(), 1e-12)
    bright = 1.0 + spec.soil_jitter * rng.standard_normal((h, w)) + spec.texture_strength * texture
    bright = np.clip(bright, 0.2, None)
    soil = gaussian_spectrum(wl, spec.soil_mean_nm, spec.soil_width_nm, spec.soil_amplitude)
    seg = _stroke_mask(spec, rng)
    root = root_spectrum(wl)
    root_bright = 1.0 + spec.root_jitter * rng.standard_normal((h, w))
    data = np.where(seg[None], root[:, None, None] * root_bright[None], soil[:, None, None] * bright[None])
    data = np.clip(data, 0.0, 1.0)
    return SpectralCube(data.astype(np.float32), wl), seg


@dataclass(frozen=True)
class Spot:
    band: int
    x: float
    y: float
    radius: float
    intensity: float = 1.0


@dataclass
class CaptureSpec:
    leds: tuple[LedBandSpec, ...] = DEFAULT_LEDS
    vignette: float = 0.0
    distortion: DistortionModel | None = None
    spots: tuple[Spot, ...] = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.vignette <= 1.0:
            raise SimulationError("vignette strength must be in [0, 1]")
        if self.noise_sigma < 0:
            raise SimulationError("noise sigma must be non-negative")
        self.spots = tuple(self.spots)
        self.leds = tuple(self.leds)

    def degraded(self) -> bool:
        return bool(self.vignette or self.distortion is not None or self.spots or self.noise_sigma)


def vignette_map(height: int, width: int, strength: float) -> np.ndarray:
    """``1 - s (1 - cos^4 theta)`` with theta reaching 45 degrees at the corners."""
    xs, ys = pixel_grid(height, width)
    r = np.hypot(xs - (width - 1) / 2.0, ys - (height - 1) / 2.0)
    theta = np.arctan(r / half_diagonal(width, height))
    return 1.0 - strength * (1.0 - np.cos(theta) ** 4)


def apply_distortion(data: np.ndarray, model: DistortionModel) -> tuple[np.ndarray, np.ndarray]:
    """Render what a distorting lens records: pixel (xd, yd) sees the scene at undistort(xd, yd).

    Returns the image and an (H, W) map of pixels whose scene point lies in
    the frame; the others read 0.
    """
    _, h, w = data.shape
    xd, yd = pixel_grid(h, w)
    xu, yu = undistort_points(model, xd, yd)
    values, inside, _ = bilinear_sample(data, xu, yu)
    return np.where(inside[None], values, 0.0), inside


def add_led_spots(data: np.ndarray, spots) -> np.ndarray:
    """Add each spot's intensity inside its disk, saturating at 1."""
    out = np.array(data, dtype=np.float64, copy=True)
    _, h, w = out.shape
    xs, ys = pixel_grid(h, w)
    for s in spots:
        if not 0 <= s.band < out.shape[0]:
            raise SimulationError(f"spot band {s.band} out of range")
        disk = (xs - s.x) ** 2 + (ys - s.y) ** 2 <= s.radius ** 2
        out[s.band] = np.where(disk, np.minimum(out[s.band] + s.intensity, 1.0), out[s.band])
    return out


def capture(gt: SpectralCube, cap: CaptureSpec) -> SpectralCube:
    """LED projection, vignette, distortion, spots, noise; each step skipped when off."""
    proj = project_cube(gt, build_projection(cap.leds, gt.wavelengths))
    if not cap.degraded():
        return proj
    data = proj.data.astype(np.float64)
    if cap.vignette:
        data = data * vignette_map(gt.height, gt.width, cap.vignette)[None]
    if cap.distortion is not None:
        data, _ = apply_distortion(data, cap.distortion)
    if cap.spots:
        data = add_led_spots(data, cap.spots)
    if cap.noise_sigma:
        rng = np.random.default_rng(cap.seed)
        data = data + rng.normal(0.0, cap.noise_sigma, size=data.shape)
    return proj.replace(data=np.clip(data, 0.0, 1.0).astype(np.float32))


def random_spots(rng: np.random.Generator, bands: int, height: int, width: int,
                 per_band: int = 1, radius=(2.0, 4.0)) -> tuple[Spot, ...]:
    spots = []
    for b in range(bands):
        for _ in range(per_band):
            spots.append(Spot(b, float(rng.uniform(0, width - 1)), float(rng.uniform(0, height - 1)),
                              float(rng.uniform(*radius)), 1.0))
    return tuple(spots)


@dataclass
class PairTruth:
    offset: tuple[int, int]  # (row, col) in reference pixels
    factor: int
    size: tuple[int, int]  # template (rows, cols) in reference pixels

    def as_dict(self) -> dict:
        return {"offset": list(self.offset), "factor": self.factor, "size": list(self.size)}


def make_pair(gt: SpectralCube, cap: CaptureSpec, offset, factor: int = 1,
              size=None) -> tuple[SpectralCube, SpectralCube, PairTruth]:
    """Our-camera view of a window of ``gt`` plus the coarser reference cube.

    The reference is ``gt`` area-downscaled by ``factor``. Our cube is the
    capture of ``gt`` rows ``[oy*factor, (oy+rows)*factor)`` and the
    matching columns, so registering it against the reference should land
    exactly on ``offset``.
    """
    factor = int(factor)
    if factor < 1:
        raise SimulationError("factor must be a positive integer")
    ref_h, ref_w = gt.height // factor, gt.width // factor
    if size is None:
        size = (ref_h // 2, ref_w // 2)
    rows, cols = int(size[0]), int(size[1])
    oy, ox = int(offset[0]), int(offset[1])
    if rows < 1 or cols < 1:
        raise SimulationError("pair size must be positive")
    if oy < 0 or ox < 0 or oy + rows > ref_h or ox + cols > ref_w:
        raise SimulationError(f"offset {tuple(offset)} with size {rows}x{cols} leaves the {ref_h}x{ref_w} reference")
    ref = gt if factor == 1 else gt.replace(
        data=np.clip(downscale_image(gt.data[:, : ref_h * factor, : ref_w * factor], factor), 0, 1).astype(np.float32))
    crop = gt.replace(data=gt.data[:, oy * factor:(oy + rows) * factor, ox * factor:(ox + cols) * factor])
    ours = capture(crop, cap)
    return ours, ref, PairTruth((oy, ox), factor, (rows, cols))


@dataclass
class SyntheticSample:
    id: str
    input: SpectralCube
    ground_truth: SpectralCube
    segmentation: np.ndarray  # at ground-truth resolution, True = root


@dataclass
class SynthConfig:
    """Settings for a paired (camera input, reference ground truth) dataset."""

    input_size: int = 64
    factor: int = 4
    bands: int = 32
    wl_start: float = 400.0
    wl_stop: float = 1000.0
    vignette: float = 0.3
    noise_sigma: float = 0.01
    spots_per_band: int = 1
    spot_radius: tuple[float, float] = (2.0, 4.0)
    scene: dict = field(default_factory=dict)

    def __post_init__(self):
        self.spot_radius = tuple(float(r) for r in self.spot_radius)
        if len(self.spot_radius) != 2 or not 0 < self.spot_radius[0] <= self.spot_radius[1]:
            raise SimulationError("spot_radius must be (low, high) with 0 < low <= high")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spot_radius"] = list(self.spot_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise SimulationError(str(exc)) from exc


def synth_sample(cfg: SynthConfig, seed: int, sample_id: str) -> SyntheticSample:
    """One pair: degraded, flat-field corrected capture and its downscaled truth."""
    rng = np.random.default_rng(seed)
    n = cfg.input_size
    scene_kw = dict(cfg.scene)
    scene_kw.update(height=n, width=n, bands=cfg.bands, wl_start=cfg.wl_start,
                    wl_stop=cfg.wl_stop, seed=int(rng.integers(2**31)))
    scene, seg = gen_scene(SceneSpec(**scene_kw))
    leds = DEFAULT_LEDS
    spots = random_spots(rng, len(leds), n, n, cfg.spots_per_band, cfg.spot_radius)
    cap = CaptureSpec(leds, cfg.vignette, None, spots, cfg.noise_sigma, int(rng.integers(2**31)))
    raw = capture(scene, cap)
    white_scene = scene.replace(data=np.ones(scene.data.shape, dtype=np.float32))
    white = capture(white_scene, CaptureSpec(leds, cfg.vignette))
    corrected, _ = flat_field_correct(raw, FlatFieldRef(white))
    f = cfg.factor
    gt = scene.replace(data=np.clip(downscale_image(scene.data, f), 0, 1).astype(np.float32))
    seg_small = downscale_image(seg.astype(np.float64), f) >= 0.5
    return SyntheticSample(sample_id, corrected, gt, seg_small)


def synth_dataset(cfg: SynthConfig, count: int, seed: int) -> list[SyntheticSample]:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [synth_sample(cfg, int(s.generate_state(1)[0]), f"s{i:04d}") for i, s in enumerate(seeds)]


def write_dataset(samples: list[SyntheticSample], out_dir, seed: int, test_count: int,
                  cfg: SynthConfig | None = None) -> Path:
    """Write cubes, segmentations and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        save_cube(s.input, out / f"{s.id}_input.hsc")
        save_cube(s.ground_truth, out / f"{s.id}_gt.hsc")
        save_mask_png(ValidityMask(s.segmentation), out / f"{s.id}_seg.png")
        records.append(SampleRecord(s.id, f"{s.id}_input.hsc", f"{s.id}_gt.hsc", f"{s.id}_seg.png"))
    train, test = split_dataset([r.id for r in records], seed, test_count)
    manifest = DatasetManifest(records, train, test, seed)
    path = out / "manifest.json"
    manifest.save(path)
    if cfg is not None:
        (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    log.info("wrote %d samples to %s", len(samples), out)
    return path
