"""Dark-field subtraction, per-band flat-field correction and radial undistortion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hypercube import SpectralCube, ValidityMask
from .sampling import bilinear_sample, pixel_grid

log = logging.getLogger(__name__)

FLAT_EPSILON = 1e-4
GN_MAX_ITER = 200
GN_STEP_TOL = 1e-10
NEWTON_MAX_ITER = 20
NEWTON_TOL_PX = 1e-8


class CalibrationError(ValueError):
    pass


class DistortionError(CalibrationError):
    pass


def _same_dims(a: SpectralCube, b: SpectralCube, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise CalibrationError(f"{what}: shape {a.shape} does not match {b.shape}")


def dark_field_subtract(lit: SpectralCube, dark: SpectralCube) -> SpectralCube:
    """Keep only the light added by the LED: clamp(lit - dark, 0, 1)."""
    _same_dims(lit, dark, "dark field")
    out = np.clip(lit.data.astype(np.float64) - dark.data, 0.0, 1.0)
    return SpectralCube(out.astype(np.float32), lit.wavelengths, raw=False)


@dataclass(frozen=True)
class FlatFieldRef:
    """White reference, one plane per band."""

    white: SpectralCube
    epsilon: float = FLAT_EPSILON
    scale: float = 1.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.white.data)):
            raise CalibrationError("white reference contains non-finite values")
        if not self.epsilon > 0:
            raise CalibrationError("epsilon must be positive")


def flat_field_correct(raw: SpectralCube, ref: FlatFieldRef) -> tuple[SpectralCube, ValidityMask]:
    _same_dims(raw, ref.white, "flat field")
    white = ref.white.data.astype(np.float64)
    ok = white > ref.epsilon
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = raw.data.astype(np.float64) / np.where(ok, white, 1.0) * ref.scale
    out = np.where(ok, np.clip(ratio, 0.0, 1.0), 0.0)
    return SpectralCube(out.astype(np.float32), raw.wavelengths), ValidityMask(ok)


@dataclass(frozen=True)
class DistortionModel:
    """Radial model ``x_d = c + (x_u - c)(1 + k1 r^2 + k2 r^4)``.

    ``r`` is the distance from the center ``(cx, cy)`` divided by ``radius``
    so k1, k2 are dimensionless. ``affine`` (2x3) maps undistorted pixel
    coordinates to the output frame of :func:`undistort`.
    """

    k1: float = 0.0
    k2: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    radius: float = 1.0
    affine: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    residual_rms: float | None = None
    board_affine: np.ndarray | None = None

    def __post_init__(self):
        aff = np.asarray(self.affine, dtype=np.float64).reshape(2, 3)
        object.__setattr__(self, "affine", aff)
        if not self.radius > 0:
            raise DistortionError("radius must be positive")
        if abs(np.linalg.det(aff[:, :2])) < 1e-12:
            raise DistortionError("affine is singular")

    @classmethod
    def identity(cls, width: int, height: int) -> "DistortionModel":
        return cls(0.0, 0.0, (width - 1) / 2.0, (height - 1) / 2.0, half_diagonal(width, height))

    def radial(self, r: np.ndarray) -> np.ndarray:
        r2 = r * r
        return r * (1.0 + self.k1 * r2 + self.k2 * r2 * r2)

    def radial_slope(self, r: np.ndarray) -> np.ndarray:
        r2 = r * r
        return 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2

    def to_dict(self) -> dict:
        return {
            "k1": self.k1, "k2": self.k2, "cx": self.cx, "cy": self.cy, "radius": self.radius,
            "affine": self.affine.tolist(), "residual_rms": self.residual_rms,
        }


def half_diagonal(width: int, height: int) -> float:
    return 0.5 * float(np.hypot(width - 1, height - 1)) or 1.0


def distort_points(model: DistortionModel, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Undistorted -> distorted pixel coordinates."""
    dx = (np.asarray(x, dtype=np.float64) - model.cx) / model.radius
    dy = (np.asarray(y, dtype=np.float64) - model.cy) / model.radius
    r2 = dx * dx + dy * dy
    f = 1.0 + model.k1 * r2 + model.k2 * r2 * r2
    return model.cx + model.radius * dx * f, model.cy + model.radius * dy * f


def undistort_points(model: DistortionModel, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Distorted -> undistorted coordinates by Newton iteration on the radius."""
    dx = (np.asarray(x, dtype=np.float64) - model.cx) / model.radius
    dy = (np.asarray(y, dtype=np.float64) - model.cy) / model.radius
    rd = np.hypot(dx, dy)
    r = rd.copy()
    tol = NEWTON_TOL_PX / model.radius
    done = np.zeros(r.shape, dtype=bool)
    for _ in range(NEWTON_MAX_ITER):
        resid = model.radial(r) - rd
        done = np.abs(resid) < tol
        if done.all():
            break
        slope = model.radial_slope(r)
        if np.any((slope <= 0) & ~done):
            raise DistortionError("radial map is not monotone on the image domain")
        r = np.where(done, r, r - resid / slope)
    else:
        done = np.abs(model.radial(r) - rd) < tol
    if not done.all():
        raise DistortionError(f"Newton inversion failed at {int((~done).sum())} pixel(s)")
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(rd > 0, r / np.where(rd > 0, rd, 1.0), 1.0)
    return model.cx + model.radius * dx * s, model.cy + model.radius * dy * s


def check_invertible(model: DistortionModel, max_radius: float) -> None:
    r = np.linspace(0.0, max_radius, 4096)
    if np.any(model.radial_slope(r) <= 0):
        raise DistortionError(
            f"distortion (k1={model.k1:g}, k2={model.k2:g}) folds over within r={max_radius:.3f}"
        )


def _affine3(a: np.ndarray) -> np.ndarray:
    return np.vstack([a, [0.0, 0.0, 1.0]])


def undistort(
    cube: SpectralCube, model: DistortionModel, mask: ValidityMask | None = None
) -> tuple[SpectralCube, ValidityMask]:
    """Resample ``cube`` onto the undistorted output frame.

    Output pixels whose source falls outside the input are zero and
    invalid; those touching an invalid input pixel keep the resampled value
    but are marked invalid.
    """
    if mask is None:
        mask = ValidityMask.all_valid(cube.height, cube.width)
    mask.check_matches(cube)
    inv = np.linalg.inv(_affine3(model.affine))
    xo, yo = pixel_grid(cube.height, cube.width)
    xu = inv[0, 0] * xo + inv[0, 1] * yo + inv[0, 2]
    yu = inv[1, 0] * xo + inv[1, 1] * yo + inv[1, 2]
    rmax = float(np.max(np.hypot(xu - model.cx, yu - model.cy))) / model.radius
    check_invertible(model, rmax)
    xd, yd = distort_points(model, xu, yu)
    values, inside, valid = bilinear_sample(cube.data, xd, yd, mask.bits)
    out = np.where(inside[None], values, 0.0)
    if not cube.raw:
        out = np.clip(out, 0.0, 1.0)
    return cube.replace(data=out.astype(np.float32)), ValidityMask(valid)


@dataclass(frozen=True)
class CornerSet:
    observed: np.ndarray  # (N, 2) pixel x, y
    board: np.ndarray  # (N, 2) lattice i, j
    pitch: float = 1.0

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=np.float64).reshape(-1, 2)
        brd = np.asarray(self.board, dtype=np.float64).reshape(-1, 2)
        if obs.shape != brd.shape:
            raise CalibrationError("observed and board coordinate counts differ")
        if not np.all(np.isfinite(obs)) or not np.all(np.isfinite(brd)):
            raise CalibrationError("corner coordinates must be finite")
        if np.any(brd != np.round(brd)):
            raise CalibrationError("board coordinates must be integer lattice indices")
        if not self.pitch > 0:
            raise CalibrationError("pitch must be positive")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "board", brd)

    def __len__(self):
        return self.observed.shape[0]


def parse_corners(text: str, pitch: float = 1.0) -> CornerSet:
    """Lines of ``obs_x obs_y board_i board_j``; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CalibrationError(f"corner line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise CalibrationError(f"corner line {lineno}: {exc}") from exc
    if not rows:
        raise CalibrationError("corner file has no entries")
    arr = np.array(rows)
    return CornerSet(arr[:, :2], arr[:, 2:], pitch)


def load_corners(path, pitch: float = 1.0) -> CornerSet:
    return parse_corners(Path(path).read_text(), pitch)


def _board_points(corners: CornerSet) -> np.ndarray:
    return corners.board * corners.pitch


def _predict(theta: np.ndarray, g: np.ndarray, radius: float) -> np.ndarray:
    k1, k2, cx, cy = theta[:4]
    a = theta[4:].reshape(2, 3)
    pu = g @ a[:, :2].T + a[:, 2]
    m = DistortionModel(k1, k2, cx, cy, radius)
    xd, yd = distort_points(m, pu[:, 0], pu[:, 1])
    return np.stack([xd, yd], axis=1)


def _residual(theta, g, obs, radius) -> np.ndarray:
    return (_predict(theta, g, radius) - obs).ravel()


def _numeric_jacobian(theta, g, obs, radius) -> np.ndarray:
    jac = np.empty((obs.size, theta.size))
    for i in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        jac[:, i] = (_residual(tp, g, obs, radius) - _residual(tm, g, obs, radius)) / (2.0 * h)
    return jac


def _gauss_newton(theta, free, g, obs, radius):
    r = _residual(theta, g, obs, radius)
    cost = float(r @ r)
    for it in range(GN_MAX_ITER):
        jac = _numeric_jacobian(theta, g, obs, radius)[:, free]
        step = np.zeros_like(theta)
        step[free], *_ = np.linalg.lstsq(jac, -r, rcond=None)
        if np.linalg.norm(step) < GN_STEP_TOL:
            return theta, cost, it + 1
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            rc = _residual(cand, g, obs, radius)
            cc = float(rc @ rc)
            if cc <= cost:
                break
            t *= 0.5
        else:
            # no descent along the GN direction: cost is at the rounding floor
            return theta, cost, it + 1
        theta, r, cost = cand, rc, cc
        if t * np.linalg.norm(step) < GN_STEP_TOL:
            return theta, cost, it + 1
    raise CalibrationError(f"Gauss-Newton did not converge in {GN_MAX_ITER} iterations")


def fit_distortion(
    corners: CornerSet,
    radius: float | None = None,
    image_size: tuple[int, int] | None = None,
) -> DistortionModel:
    """Fit k1, k2, the center and a board->pixel affine to chessboard corners.

    Gauss-Newton with a central-difference Jacobian. ``image_size`` is
    (width, height); it seeds the center and the default ``radius``.
    """
    if len(corners) < 6:
        raise CalibrationError(f"need at least 6 corners, got {len(corners)}")
    g = _board_points(corners)
    obs = corners.observed
    design = np.hstack([g, np.ones((len(g), 1))])
    if np.linalg.matrix_rank(design) < 3:
        raise CalibrationError("board coordinates are collinear")
    if image_size is not None:
        center = np.array([(image_size[0] - 1) / 2.0, (image_size[1] - 1) / 2.0])
        if radius is None:
            radius = half_diagonal(*image_size)
    else:
        center = obs.mean(axis=0)
    if radius is None:
        radius = float(np.max(np.linalg.norm(obs - obs.mean(axis=0), axis=1))) or 1.0

    aff, *_ = np.linalg.lstsq(design, obs, rcond=None)
    theta = np.concatenate([[0.0, 0.0], center, aff.T.ravel()])
    # the center is unobservable while k1 = k2 = 0, so hold it until k is fitted
    phase1 = np.array([True, True, False, False] + [True] * 6)
    theta, cost, it1 = _gauss_newton(theta, phase1, g, obs, radius)
    theta, cost, it2 = _gauss_newton(theta, np.ones(10, dtype=bool), g, obs, radius)
    it = it1 + it2
    rms = float(np.sqrt(cost / len(g)))
    log.debug("fit_distortion: %d iterations, rms %.3g px", it, rms)
    k1, k2, cx, cy = theta[:4]
    return DistortionModel(
        float(k1), float(k2), float(cx), float(cy), float(radius),
        residual_rms=rms, board_affine=theta[4:].reshape(2, 3).copy(),
    )


def reprojection_rms(model: DistortionModel, corners: CornerSet) -> float:
    """RMS corner error of ``model`` with its board affine."""
    if model.board_affine is None:
        raise CalibrationError("model carries no board affine")
    theta = np.concatenate([[model.k1, model.k2, model.cx, model.cy], model.board_affine.ravel()])
    r = _residual(theta, _board_points(corners), corners.observed, model.radius)
    return float(np.sqrt(r @ r / len(corners)))


def identity_rms(corners: CornerSet) -> float:
    """RMS of the best distortion-free (pure affine) fit."""
    g = _board_points(corners)
    design = np.hstack([g, np.ones((len(g), 1))])
    aff, *_ = np.linalg.lstsq(design, corners.observed, rcond=None)
    r = design @ aff - corners.observed
    return float(np.sqrt(np.sum(r * r) / len(g)))


def calibrate(
    raw: SpectralCube,
    white: SpectralCube,
    model: DistortionModel | None = None,
    dark: SpectralCube | None = None,
    epsilon: float = FLAT_EPSILON,
) -> tuple[SpectralCube, ValidityMask]:
    """Full chain: optional dark subtraction, flat field, optional undistortion."""
    if dark is not None:
        raw = dark_field_subtract(raw, dark)
        white = dark_field_subtract(white, dark)
    cube, mask = flat_field_correct(raw, FlatFieldRef(white, epsilon))
    if model is not None:
        cube, mask = undistort(cube, model, mask)
    return cube, mask

