"""Parallel-beam system model: exact-length ray tracing, projection and
low-dose measurement simulation.

Coordinates: the image grid is centered on the origin, column index grows
with +x and row index grows with -y (row 0 is the top row).  The ray for
detector ``k`` at view angle ``theta`` is the line ``{p : p . (cos theta,
sin theta) = s_k}`` with ``s_k = (k - (n_detectors - 1) / 2) * detector_spacing``.
Sinograms are stored detector-major, shape ``(n_detectors, n_views)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

# direction components below this are treated as exactly axis-aligned
_AXIS_EPS = 1e-12
# relative distance (in pixels) under which a ray is considered on a grid line
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam scan geometry.

    Attributes:
        image_width, image_height: grid size in pixels.
        pixel_size: pixel side in mm.
        n_detectors: detector bins per view.
        detector_spacing: bin spacing in mm.
        angles: view angles in radians, strictly increasing in [0, pi).
    """

    image_width: int
    image_height: int
    pixel_size: float
    n_detectors: int
    detector_spacing: float
    angles: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        for name in ("image_width", "image_height", "n_detectors"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not self.pixel_size > 0 or not self.detector_spacing > 0:
            raise ValidationError("pixel_size and detector_spacing must be positive")
        a = np.asarray(self.angles)
        if a.size < 1:
            raise ValidationError("at least one view angle is required")
        if np.any(a < 0) or np.any(a >= np.pi) or np.any(np.diff(a) <= 0):
            raise ValidationError("angles must be strictly increasing within [0, pi)")

    @property
    def n_views(self) -> int:
        return len(self.angles)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_detectors, self.n_views)

    @property
    def n_pixels(self) -> int:
        return self.image_width * self.image_height

    @property
    def n_rays(self) -> int:
        return self.n_detectors * self.n_views

    def detector_positions(self) -> np.ndarray:
        k = np.arange(self.n_detectors)
        return (k - (self.n_detectors - 1) / 2.0) * self.detector_spacing


def parallel_geometry(size, pixel_size=1.0, n_views=None, n_detectors=None,
                      detector_spacing=None) -> Geometry:
    """Square-grid geometry with equispaced views over [0, pi).

    Defaults cover the full field of view: the detector spans the image
    diagonal at one bin per pixel and the number of views is ``ceil(pi/2 * size)``
    rounded to an even count.
    """
    if detector_spacing is None:
        detector_spacing = pixel_size
    if n_detectors is None:
        n_detectors = int(np.ceil(size * np.sqrt(2) * pixel_size / detector_spacing)) + 1
    if n_views is None:
        n_views = 2 * int(np.ceil(np.pi * size / 4))
    angles = np.arange(n_views) * np.pi / n_views
    return Geometry(size, size, float(pixel_size), int(n_detectors),
                    float(detector_spacing), tuple(angles))


def _trace_ray(theta, s, geom: Geometry):
    """Pixel indices and intersection lengths of one ray (Siddon-style)."""
    W, H, ps = geom.image_width, geom.image_height, geom.pixel_size
    c, sn = np.cos(theta), np.sin(theta)
    dx, dy = -sn, c
    if abs(dx) < _AXIS_EPS:
        dx = 0.0
        dy = 1.0 if dy > 0 else -1.0
    if abs(dy) < _AXIS_EPS:
        dy = 0.0
        dx = 1.0 if dx > 0 else -1.0
    if dx == 0.0:
        c, sn = 1.0 if dy > 0 else -1.0, 0.0
    elif dy == 0.0:
        c, sn = 0.0, 1.0 if dx < 0 else -1.0
    px, py = s * c, s * sn
    x0, y0 = -W * ps / 2.0, -H * ps / 2.0

    # axis-aligned rays: one column (or row), possibly split across a grid line
    if dx == 0.0:
        u = (px - x0) / ps
        return _axis_ray(u, W, H, ps, column=True)
    if dy == 0.0:
        u = (py - y0) / ps
        return _axis_ray(u, W, H, ps, column=False)

    tx = (x0 + ps * np.arange(W + 1) - px) / dx
    ty = (y0 + ps * np.arange(H + 1) - py) / dy
    t_lo = max(min(tx[0], tx[-1]), min(ty[0], ty[-1]))
    t_hi = min(max(tx[0], tx[-1]), max(ty[0], ty[-1]))
    if t_hi <= t_lo:
        return np.empty(0, dtype=np.int64), np.empty(0)
    t = np.concatenate((tx, ty))
    t = t[(t > t_lo) & (t < t_hi)]
    t = np.unique(np.concatenate(([t_lo], t, [t_hi])))
    seg = np.diff(t)
    keep = seg > 0
    tm = 0.5 * (t[:-1] + t[1:])[keep]
    seg = seg[keep]
    col = np.floor((px + tm * dx - x0) / ps).astype(np.int64)
    yrow = np.floor((py + tm * dy - y0) / ps).astype(np.int64)
    ok = (col >= 0) & (col < W) & (yrow >= 0) & (yrow < H)
    row = H - 1 - yrow[ok]
    return row * W + col[ok], seg[ok]


def _axis_ray(u, W, H, ps, column):
    # u: ray offset in pixel units from the low grid edge
    n_across, n_along = (W, H) if column else (H, W)
    k = np.round(u)
    if abs(u - k) < _EDGE_EPS:
        cand = [(int(k) - 1, 0.5), (int(k), 0.5)]
    else:
        cand = [(int(np.floor(u)), 1.0)]
    idx, val = [], []
    for j, w in cand:
        if 0 <= j < n_across:
            along = np.arange(n_along)
            if column:
                idx.append(along * W + j)
            else:
                idx.append((H - 1 - j) * W + along)
            val.append(np.full(n_along, w * ps))
    if not idx:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(idx), np.concatenate(val)


@functools.lru_cache(maxsize=16)
def system_matrix(geom: Geometry) -> sp.csr_matrix:
    """Sparse ``(n_rays, n_pixels)`` matrix of exact intersection lengths.

    Row ``k * n_views + v`` holds detector ``k`` at view ``v``.  Cached per
    geometry; treat the result as read-only.
    """
    svals = geom.detector_positions()
    rows, cols, vals = [], [], []
    for k, s in enumerate(svals):
        for v, theta in enumerate(geom.angles):
            idx, seg = _trace_ray(theta, s, geom)
            rows.append(np.full(idx.size, k * geom.n_views + v, dtype=np.int64))
            cols.append(idx)
            vals.append(seg)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_rays, geom.n_pixels),
    )
    A.sum_duplicates()
    A.sort_indices()
    return A


@functools.lru_cache(maxsize=16)
def _system_matrix_t(geom: Geometry) -> sp.csr_matrix:
    return system_matrix(geom).T.tocsr()


class Projector:
    """Forward/back projector bound to one geometry, counting its calls.

    The call counters let callers audit operation counts (one forward and
    one back projection per solver iteration).
    """

    def __init__(self, geom: Geometry):
        self.geom = geom
        self.matrix = system_matrix(geom)
        self._matrix_t = _system_matrix_t(geom)
        self.forward_calls = 0
        self.back_calls = 0

    @property
    def calls(self) -> int:
        return self.forward_calls + self.back_calls

    @property
    def image_shape(self):
        return self.geom.image_shape

    @property
    def sino_shape(self):
        return self.geom.sino_shape

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def forward(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.geom.image_shape:
            raise ValidationError(
                f"image shape {img.shape} does not match geometry {self.geom.image_shape}")
        self.forward_calls += 1
        return (self.matrix @ img.ravel()).reshape(self.geom.sino_shape)

    def back(self, sino: np.ndarray) -> np.ndarray:
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape != self.geom.sino_shape:
            raise ValidationError(
                f"sinogram shape {sino.shape} does not match geometry {self.geom.sino_shape}")
        self.back_calls += 1
        return (self._matrix_t @ sino.ravel()).reshape(self.geom.image_shape)


def forward_project(img, geom: Geometry) -> np.ndarray:
    """Line integrals of the piecewise-constant image ``img`` along every ray."""
    return Projector(geom).forward(img)


def back_project(sino, geom: Geometry) -> np.ndarray:
    """Exact adjoint of :func:`forward_project`."""
    return Projector(geom).back(sino)


def compute_weights(counts, readout_variance: float) -> np.ndarray:
    """Poisson-Gaussian statistical weights ``rho**2 / (rho + sigma**2)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if readout_variance < 0:
        raise ValidationError("readout_variance must be >= 0")
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ValidationError("counts must be finite and non-negative")
    denom = counts + readout_variance
    out = np.zeros_like(counts)
    np.divide(counts * counts, denom, out=out, where=denom > 0)
    return out


@dataclass
class Measurements:
    counts: np.ndarray
    sinogram: np.ndarray
    weights: np.ndarray

    def __iter__(self):
        return iter((self.counts, self.sinogram, self.weights))


def simulate_measurements(truth, geom: Geometry, incident_photons: float,
                          readout_variance: float, seed: int | None = None,
                          noiseless: bool = False) -> Measurements:
    """Simulate pre-log counts, post-log sinogram and weights.

    Counts are ``Poisson(rho0 * exp(-A x)) + Normal(0, sigma**2)`` clamped
    below at 1; the post-log sinogram is ``log(rho0 / counts)``.  With
    ``noiseless`` the counts are their means and the sinogram is ``A x``
    exactly.
    """
    if not incident_photons > 0:
        raise ValidationError("incident_photons must be positive")
    if readout_variance < 0:
        raise ValidationError("readout_variance must be >= 0")
    line = forward_project(truth, geom)
    mean = incident_photons * np.exp(-line)
    if noiseless:
        return Measurements(mean, line, compute_weights(mean, readout_variance))
    rng = np.random.default_rng(seed)
    counts = rng.poisson(mean).astype(np.float64)
    if readout_variance > 0:
        counts += rng.normal(0.0, np.sqrt(readout_variance), size=counts.shape)
    counts = np.maximum(counts, 1.0)
    sino = np.log(incident_photons / counts)
    return Measurements(counts, sino, compute_weights(counts, readout_variance))


class MatrixOperator:
    """Explicit-matrix stand-in for :class:`Projector` (small problems, tests)."""

    def __init__(self, matrix, image_shape, sino_shape):
        self.matrix = sp.csr_matrix(matrix) if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
        self.image_shape = tuple(image_shape)
        self.sino_shape = tuple(sino_shape)
        self.forward_calls = 0
        self.back_calls = 0

    @property
    def calls(self) -> int:
        return self.forward_calls + self.back_calls

    def forward(self, img):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.image_shape:
            raise ValidationError("image shape does not match operator")
        self.forward_calls += 1
        return np.asarray(self.matrix @ img.ravel()).reshape(self.sino_shape)

    def back(self, sino):
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape != self.sino_shape:
            raise ValidationError("sinogram shape does not match operator")
        self.back_calls += 1
        return np.asarray(self.matrix.T @ sino.ravel()).reshape(self.image_shape)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if sp.issparse(self.matrix) else np.array(self.matrix)
