"""Weighted least-squares reconstruction with a proximal pull toward a
denoised image, under non-negativity:

    F(x) = 1/2 ||y - A x||_W^2 + beta/2 ||x - z||^2,   x >= 0

solved by accelerated proximal gradient with the separable majorizer
``M = diag(A^T W A 1) + beta I`` (``apgm``) or without momentum (``pgm``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .physics import Geometry, Projector

# dense oracle cap, in pixels
DENSE_MAX_PIXELS = 16 * 16


@dataclass(frozen=True)
class MbirProblem:
    sinogram: np.ndarray
    weights: np.ndarray
    denoised: np.ndarray
    beta: float
    geom: Geometry | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError("beta must be positive")
        if np.shape(self.sinogram) != np.shape(self.weights):
            raise ValidationError("sinogram and weights shapes differ")
        if self.geom is not None:
            if np.shape(self.sinogram) != self.geom.sino_shape:
                raise ValidationError("sinogram does not match geometry")
            if np.shape(self.denoised) != self.geom.image_shape:
                raise ValidationError("denoised image does not match geometry")


@dataclass(frozen=True)
class SolverConfig:
    iterations: int = 30
    variant: str = "apgm"
    record_trace: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.variant not in ("apgm", "pgm"):
            raise ValidationError(f"unknown solver variant {self.variant!r}")


@dataclass
class SolverTrace:
    """Per-iteration record: ``objective[j] = F(x_j)``, ``step_norm[j] = ||x_j - x_{j-1}||``.

    Entry 0 is the initial image (step norm 0).  Objectives are only filled
    when tracing is enabled.
    """

    objective: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)

    def rows(self):
        for j, (f, s) in enumerate(zip(self.objective, self.step_norm)):
            yield j, f, s

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "step_norm"])
            for j, f, s in self.rows():
                w.writerow([j, repr(float(f)), repr(float(s))])


def _operator(prob: MbirProblem, op):
    if op is not None:
        return op
    if prob.geom is None:
        raise ValidationError("either a geometry or an explicit operator is required")
    return Projector(prob.geom)


def objective(x, prob: MbirProblem, op=None) -> float:
    """Value of ``F(x)``; costs one forward projection."""
    op = _operator(prob, op)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != np.shape(prob.denoised):
        raise ValidationError("image shape does not match problem")
    r = prob.sinogram - op.forward(x)
    d = x - prob.denoised
    return float(0.5 * np.sum(prob.weights * r * r) + 0.5 * prob.beta * np.sum(d * d))


def build_majorizer(geom: Geometry | None, weights, beta: float, op=None) -> np.ndarray:
    """Diagonal ``A^T W A 1 + beta`` (valid because ``A`` is entrywise non-negative)."""
    if not beta > 0:
        raise ValidationError("beta must be positive")
    if op is None:
        op = Projector(geom)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValidationError("weights must be non-negative")
    return op.back(weights * op.forward(np.ones(op.image_shape))) + beta


def momentum_sequence(n: int) -> np.ndarray:
    """``t_0 = 1, t_{j+1} = (1 + sqrt(1 + 4 t_j^2)) / 2`` for ``j < n``."""
    t = np.empty(n + 1)
    t[0] = 1.0
    for j in range(n):
        t[j + 1] = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t[j] * t[j]))
    return t


def apgm_solve(prob: MbirProblem, x_init, majorizer, cfg: SolverConfig = SolverConfig(),
               op=None):
    """Run ``cfg.iterations`` majorized proximal-gradient steps from ``x_init``.

    Returns ``(x, trace)`` where ``x`` is the last non-negative iterate.
    """
    op = _operator(prob, op)
    x = np.array(x_init, dtype=np.float64)
    if x.shape != np.shape(prob.denoised) or np.shape(majorizer) != x.shape:
        raise ValidationError("x_init, majorizer and denoised image shapes must agree")
    if not np.all(np.isfinite(x)):
        raise ValidationError("x_init must be finite")
    inv_m = 1.0 / np.asarray(majorizer, dtype=np.float64)
    y, w, z, beta = prob.sinogram, prob.weights, prob.denoised, prob.beta

    trace = SolverTrace()
    if cfg.record_trace:
        trace.objective.append(objective(x, prob, op))
        trace.step_norm.append(0.0)
    v = x.copy()
    t = 1.0
    for _ in range(cfg.iterations):
        grad = op.back(w * (y - op.forward(v))) - beta * (v - z)
        x_new = np.maximum(v + inv_m * grad, 0.0)
        if cfg.variant == "apgm":
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            v = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        else:
            v = x_new
        if cfg.record_trace:
            trace.objective.append(objective(x_new, prob, op))
            trace.step_norm.append(float(np.linalg.norm(x_new - x)))
        x = x_new
    return x, trace


def solve_exact_small(prob: MbirProblem, op=None):
    """Dense solve of ``(A^T W A + beta I) x = A^T W y + beta z`` (constraint ignored).

    Returns ``(x, constraint_active)`` where the flag reports negative entries.
    """
    op = _operator(prob, op)
    n = int(np.prod(op.image_shape))
    if n > DENSE_MAX_PIXELS:
        raise ValidationError(f"dense solve limited to {DENSE_MAX_PIXELS} pixels")
    A = op.dense()
    w = np.asarray(prob.weights, dtype=np.float64).ravel()
    H = A.T @ (w[:, None] * A) + prob.beta * np.eye(n)
    rhs = A.T @ (w * np.asarray(prob.sinogram).ravel()) + prob.beta * np.asarray(prob.denoised).ravel()
    x = np.linalg.solve(H, rhs).reshape(op.image_shape)
    return x, bool(np.any(x < 0))
