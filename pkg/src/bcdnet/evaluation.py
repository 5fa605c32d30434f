"""Ellipse phantoms, Hounsfield conversion and ROI error metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError

MU_WATER = 0.02  # mm^-1


@dataclass(frozen=True)
class Ellipse:
    center_x: float  # mm
    center_y: float  # mm
    semi_x: float  # mm
    semi_y: float  # mm
    rotation: float  # rad
    delta: float  # mm^-1

    def __post_init__(self):
        if not (self.semi_x > 0 and self.semi_y > 0):
            raise ValidationError("ellipse semi-axes must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    width: int
    height: int
    pixel_size: float
    ellipses: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(
            e if isinstance(e, Ellipse) else Ellipse(**e) for e in self.ellipses))
        if self.width < 1 or self.height < 1 or not self.pixel_size > 0:
            raise ValidationError("phantom grid must be non-empty with positive pixel size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ellipses"] = [asdict(e) for e in self.ellipses]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(int(d["width"]), int(d["height"]), float(d["pixel_size"]),
                   tuple(d.get("ellipses", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def pixel_centers(width, height, pixel_size):
    """``(X, Y)`` grids of pixel-center coordinates in mm (row 0 at the top)."""
    xs = (np.arange(width) - (width - 1) / 2.0) * pixel_size
    ys = ((height - 1) / 2.0 - np.arange(height)) * pixel_size
    return np.meshgrid(xs, ys)


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Sum of ellipse deltas over the ellipses containing each pixel center."""
    X, Y = pixel_centers(spec.width, spec.height, spec.pixel_size)
    img = np.zeros((spec.height, spec.width))
    for e in spec.ellipses:
        c, s = np.cos(e.rotation), np.sin(e.rotation)
        dx, dy = X - e.center_x, Y - e.center_y
        u = (c * dx + s * dy) / e.semi_x
        v = (-s * dx + c * dy) / e.semi_y
        img[u * u + v * v <= 1.0] += e.delta
    return img


def random_phantom_spec(seed: int, size: int = 64, pixel_size: float = 4.0,
                        n_features: int = 6, mu_water: float = MU_WATER) -> PhantomSpec:
    """Random body-like phantom: a water ellipse with a bony rim and random
    interior features.

    Distinct seeds give distinct ellipse parameters; keep train and test
    seed ranges disjoint.
    """
    rng = np.random.default_rng(seed)
    half = size * pixel_size / 2.0
    ax = half * rng.uniform(0.72, 0.86)
    ay = half * rng.uniform(0.6, 0.78)
    ellipses = [
        Ellipse(0.0, 0.0, ax, ay, 0.0, 1.3 * mu_water),
        Ellipse(0.0, 0.0, 0.92 * ax, 0.9 * ay, 0.0, -0.3 * mu_water),
    ]
    for _ in range(n_features):
        r = np.sqrt(rng.uniform(0, 1)) * 0.6
        phi = rng.uniform(0, 2 * np.pi)
        ellipses.append(Ellipse(
            float(r * ax * np.cos(phi)), float(r * ay * np.sin(phi)),
            float(half * rng.uniform(0.05, 0.2)), float(half * rng.uniform(0.05, 0.2)),
            float(rng.uniform(0, np.pi)),
            float(mu_water * rng.choice([-1, 1]) * rng.uniform(0.1, 0.5)),
        ))
    return PhantomSpec(size, size, pixel_size, tuple(ellipses))


def mu_to_hu(img, mu_water: float = MU_WATER) -> np.ndarray:
    if not mu_water > 0:
        raise ValidationError("mu_water must be positive")
    return 1000.0 * (np.asarray(img, dtype=np.float64) - mu_water) / mu_water


def hu_to_mu(img, mu_water: float = MU_WATER) -> np.ndarray:
    if not mu_water > 0:
        raise ValidationError("mu_water must be positive")
    return mu_water * (1.0 + np.asarray(img, dtype=np.float64) / 1000.0)


def central_disc_roi(shape, radius_fraction: float = 0.5) -> np.ndarray:
    """Boolean disc centered on the grid, radius a fraction of the half-width."""
    H, W = shape
    i, j = np.mgrid[:H, :W]
    ci, cj = (H - 1) / 2.0, (W - 1) / 2.0
    rad = radius_fraction * min(H, W) / 2.0
    return (i - ci) ** 2 + (j - cj) ** 2 <= rad * rad


def rmse_hu(x, truth, roi=None, mu_water: float = MU_WATER) -> float:
    """Root-mean-square HU error over the ROI pixels (whole image by default)."""
    x = np.asarray(x, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if x.shape != truth.shape:
        raise ValidationError("image and truth shapes differ")
    if roi is None:
        roi = np.ones(x.shape, dtype=bool)
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != x.shape or not roi.any():
        raise ValidationError("ROI must match the image and select at least one pixel")
    d = mu_to_hu(x, mu_water)[roi] - mu_to_hu(truth, mu_water)[roi]
    return float(np.sqrt(np.mean(d * d)))
