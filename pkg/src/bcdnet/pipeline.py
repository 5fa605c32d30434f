"""BCD-Net: alternating learned denoising and MBIR, its layer-wise training,
and empirical convergence diagnostics.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import denoiser as dn
from .errors import ValidationError
from .evaluation import MU_WATER, pixel_centers, rmse_hu
from .mbir import MbirProblem, SolverConfig, apgm_solve, build_majorizer, objective
from .physics import Geometry, Projector

logger = logging.getLogger(__name__)

# dense eigen-solve cap for the positive-definiteness check, in pixels
DENSE_EIG_MAX_PIXELS = 32 * 32


@dataclass
class BcdNetModel:
    layers: list
    beta: float
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValidationError("a model needs at least one layer")
        if not self.beta > 0:
            raise ValidationError("beta must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def zero_denoiser_model(n_layers: int, beta: float, solver: SolverConfig = SolverConfig(),
                        n_filters: int = 1, filter_size: int = 9) -> BcdNetModel:
    """Model whose denoisers output zero: reconstruction reduces to plain MBIR
    with a Tikhonov pull toward 0."""
    p = dn.AutoencoderParams(np.zeros((filter_size, n_filters)),
                             np.zeros((filter_size, n_filters)), np.zeros(n_filters))
    return BcdNetModel([p.copy() for _ in range(n_layers)], beta, solver)


@dataclass
class LayerRecord:
    layer: int
    rmse_hu: float
    objective: float
    objective_start: float
    step_norm: float
    epsilon_hat: float
    seconds: float
    projector_calls: int


@dataclass
class LayerTrace:
    """Per-layer log of one reconstruction.

    ``setup_projector_calls`` counts the majorizer construction, done once
    before the layers.
    """

    records: list = field(default_factory=list)
    setup_projector_calls: int = 0

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    CSV_COLUMNS = ("layer", "rmse_hu", "objective", "step_norm", "epsilon_hat",
                   "seconds", "projector_calls")

    def write_csv(self, path, include_seconds: bool = True):
        """Write the trace; ``include_seconds=False`` blanks wall times for
        byte-reproducible output."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_COLUMNS)
            for r in self.records:
                w.writerow([
                    r.layer, _fmt(r.rmse_hu), _fmt(r.objective), _fmt(r.step_norm),
                    _fmt(r.epsilon_hat), _fmt(r.seconds) if include_seconds else "",
                    r.projector_calls,
                ])


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v))


def ramp_filter(sino: np.ndarray, spacing: float) -> np.ndarray:
    """Ram-Lak filtering of every view (detector axis 0), band-limited spatial kernel."""
    n = sino.shape[0]
    size = int(2 ** np.ceil(np.log2(2 * n)))
    k = np.arange(-(size // 2), size // 2)
    h = np.zeros(size)
    h[k == 0] = 1.0 / (4.0 * spacing ** 2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    h = np.fft.ifftshift(h)
    padded = np.zeros((size, sino.shape[1]))
    padded[:n] = sino
    out = np.fft.ifft(np.fft.fft(padded, axis=0) * np.fft.fft(h)[:, None], axis=0).real
    return spacing * out[:n]


def fbp(sino, geom: Geometry) -> np.ndarray:
    """Filtered backprojection (Ram-Lak, linear-interpolation backprojector)."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_shape:
        raise ValidationError("sinogram does not match geometry")
    q = ramp_filter(sino, geom.detector_spacing)
    X, Y = pixel_centers(geom.image_width, geom.image_height, geom.pixel_size)
    s0 = geom.detector_positions()[0]
    img = np.zeros(geom.image_shape)
    for v, theta in enumerate(geom.angles):
        s = X * np.cos(theta) + Y * np.sin(theta)
        img += np.interp((s - s0) / geom.detector_spacing, np.arange(geom.n_detectors),
                         q[:, v], left=0.0, right=0.0)
    # equispaced views over [0, pi)
    return img * np.pi / geom.n_views


def init_image(sino, geom: Geometry, method: str = "fbp", weights=None,
               iterations: int = 20) -> np.ndarray:
    """Initial image ``x0``: ``fbp`` (clipped at 0), ``zero``, or ``wls``
    (proximal-gradient iterations on the weighted LS problem with a tiny
    pull toward 0)."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sino_shape:
        raise ValidationError("sinogram does not match geometry")
    if method == "zero":
        return np.zeros(geom.image_shape)
    if method == "fbp":
        return np.maximum(fbp(sino, geom), 0.0)
    if method == "wls":
        w = np.ones_like(sino) if weights is None else np.asarray(weights, dtype=np.float64)
        op = Projector(geom)
        hess_diag = build_majorizer(geom, w, 1.0, op) - 1.0
        beta = 1e-9 * max(float(hess_diag.max()), 1e-300)
        prob = MbirProblem(sino, w, np.zeros(geom.image_shape), beta, geom)
        x, _ = apgm_solve(prob, np.zeros(geom.image_shape), hess_diag + beta,
                          SolverConfig(iterations, "pgm"), op)
        return x
    raise ValidationError(f"unknown init method {method!r}")


def reconstruct(sino, weights, geom: Geometry, model: BcdNetModel, x0, truth=None,
                roi=None, mu_water: float = MU_WATER, epsilon_probes: int = 4,
                seed: int = 0, op=None):
    """Run the ``L`` denoise/MBIR alternations of ``model`` from ``x0``.

    Each MBIR is warm-started at the previous layer output and shares one
    majorizer.  Returns ``(x_L, LayerTrace)``.  ``epsilon_probes = 0``
    skips the layer-pair expansion estimate.
    """
    x = np.array(x0, dtype=np.float64)
    if x.shape != geom.image_shape:
        raise ValidationError("x0 does not match geometry")
    sino = np.asarray(sino, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if sino.shape != geom.sino_shape or weights.shape != geom.sino_shape:
        raise ValidationError("sinogram/weights do not match geometry")
    if truth is not None and np.shape(truth) != geom.image_shape:
        raise ValidationError("truth does not match geometry")

    op = op or Projector(geom)
    calls0 = op.calls
    M = build_majorizer(geom, weights, model.beta, op)
    trace = LayerTrace(setup_projector_calls=op.calls - calls0)
    for l, params in enumerate(model.layers):
        tic = time.perf_counter()
        calls0 = op.calls
        z = dn.denoise(x, params)
        prob = MbirProblem(sino, weights, z, model.beta, geom)
        f_start = objective(x, prob, op)
        x_new, _ = apgm_solve(prob, x, M, model.solver, op)
        f_end = objective(x_new, prob, op)
        eps = float("nan")
        if l > 0 and epsilon_probes > 0:
            eps = dn.estimate_epsilon(model.layers[l - 1], params, epsilon_probes,
                                      seed=(seed, l), samples=[x],
                                      scale=0.1 * (float(np.std(x)) or 1.0))
        rec = LayerRecord(
            layer=l + 1,
            rmse_hu=rmse_hu(x_new, truth, roi, mu_water) if truth is not None else float("nan"),
            objective=f_end,
            objective_start=f_start,
            step_norm=float(np.linalg.norm(x_new - x)),
            epsilon_hat=eps,
            seconds=time.perf_counter() - tic,
            projector_calls=op.calls - calls0,
        )
        trace.records.append(rec)
        logger.info("layer %d: F=%.6g step=%.3g", rec.layer, rec.objective, rec.step_norm)
        x = x_new
    return x, trace


def step_norm_series(trace: LayerTrace) -> list:
    """``||x^(l+1) - x^(l)||_2`` per layer."""
    return [float(r.step_norm) for r in trace.records]


@dataclass
class TrainingSet:
    truths: list
    sinograms: list
    weights: list
    inits: list
    geom: Geometry

    def __post_init__(self):
        n = len(self.truths)
        if n < 1:
            raise ValidationError("training set is empty")
        if not (len(self.sinograms) == len(self.weights) == len(self.inits) == n):
            raise ValidationError("training set lists differ in length")
        for x, y, w, x0 in zip(self.truths, self.sinograms, self.weights, self.inits):
            if np.shape(x) != self.geom.image_shape or np.shape(x0) != self.geom.image_shape:
                raise ValidationError("training image does not match geometry")
            if np.shape(y) != self.geom.sino_shape or np.shape(w) != self.geom.sino_shape:
                raise ValidationError("training sinogram does not match geometry")

    def __len__(self):
        return len(self.truths)


@dataclass
class LayerTrainingLog:
    layer: int
    initial_loss: float
    final_loss: float
    zero_map_loss: float
    mean_rmse_hu: float

    @property
    def descended(self) -> bool:
        return self.final_loss <= self.initial_loss


def train_bcdnet(ts: TrainingSet, beta: float, solver: SolverConfig, tcfg: dn.TrainConfig,
                 n_layers: int, n_filters: int = 16, filter_size: int = 9,
                 patch_stride: int = 1, roi=None, mu_water: float = MU_WATER):
    """Greedy layer-by-layer training.

    Layer ``l`` fits its autoencoder to map patches of the current images
    ``x_i^(l)`` to patches of the truths ``x_i``, then advances every
    ``x_i^(l)`` by one denoise + MBIR step exactly as :func:`reconstruct`
    would.  Returns ``(model, logs)`` with one :class:`LayerTrainingLog`
    per layer.
    """
    if n_layers < 1:
        raise ValidationError("n_layers must be >= 1")
    r = dn.filter_side(filter_size)
    op = Projector(ts.geom)
    majorizers = [build_majorizer(ts.geom, w, beta, op) for w in ts.weights]
    states = [np.array(x0, dtype=np.float64) for x0 in ts.inits]
    target = dn.extract_patches(ts.truths, r, patch_stride)
    zero_loss = float(np.sum(target * target) / target.size)

    layers, logs = [], []
    for l in range(n_layers):
        inp = dn.extract_patches(states, r, patch_stride)
        cfg_l = _with_seed(tcfg, tcfg.seed + l)
        fit = dn.fit_layer(target, inp, cfg_l, n_filters)
        layers.append(fit.params)
        for i in range(len(ts)):
            z = dn.denoise(states[i], fit.params)
            prob = MbirProblem(ts.sinograms[i], ts.weights[i], z, beta, ts.geom)
            states[i], _ = apgm_solve(prob, states[i], majorizers[i], solver, op)
        mean_rmse = float(np.mean([rmse_hu(s, x, roi, mu_water)
                                   for s, x in zip(states, ts.truths)]))
        logs.append(LayerTrainingLog(l + 1, fit.initial_loss, fit.final_loss, zero_loss, mean_rmse))
        logger.info("trained layer %d: loss %.4g -> %.4g, mean RMSE %.2f HU",
                    l + 1, fit.initial_loss, fit.final_loss, mean_rmse)
    return BcdNetModel(layers, beta, solver), logs


def _with_seed(cfg: dn.TrainConfig, seed: int) -> dn.TrainConfig:
    return replace(cfg, seed=seed)


@dataclass
class ConvergenceReport:
    """Empirical check of the sequence-convergence assumptions (not a proof)."""

    min_eigenvalue: float | None
    rayleigh_quotients: list
    positive_definite: bool
    epsilons: list
    epsilon_running_sum: list
    lipschitz: list
    epsilon_decaying: bool

    @property
    def ok(self) -> bool:
        return self.positive_definite and self.epsilon_decaying

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "index", "value"])
            if self.min_eigenvalue is not None:
                w.writerow(["min_eigenvalue", 0, repr(self.min_eigenvalue)])
            for i, q in enumerate(self.rayleigh_quotients):
                w.writerow(["rayleigh_quotient", i, repr(q)])
            for i, v in enumerate(self.lipschitz):
                w.writerow(["lipschitz", i + 1, repr(v)])
            for i, (e, s) in enumerate(zip(self.epsilons, self.epsilon_running_sum)):
                w.writerow(["epsilon_hat", i + 2, repr(e)])
                w.writerow(["epsilon_running_sum", i + 2, repr(s)])
            w.writerow(["positive_definite", 0, int(self.positive_definite)])
            w.writerow(["epsilon_decaying", 0, int(self.epsilon_decaying)])
            w.writerow(["ok", 0, int(self.ok)])


def check_convergence_preconditions(model: BcdNetModel, geom: Geometry, weights,
                                    probe_count: int = 16, seed: int = 0, samples=None,
                                    scale=None, n_rayleigh: int = 8) -> ConvergenceReport:
    """Positive-definiteness of ``A^T W A`` and the layer-pair expansion sequence.

    Small grids get the exact minimum eigenvalue; larger ones fall back to
    Rayleigh quotients at the all-ones vector and random probes.
    """
    weights = np.asarray(weights, dtype=np.float64)
    op = Projector(geom)
    rng = np.random.default_rng(seed)

    def rq(v):
        Av = op.forward(v)
        return float(np.sum(weights * Av * Av) / np.sum(v * v))

    quotients = [rq(np.ones(geom.image_shape))]
    quotients += [rq(rng.standard_normal(geom.image_shape)) for _ in range(n_rayleigh)]
    min_eig = None
    if geom.n_pixels <= DENSE_EIG_MAX_PIXELS:
        A = op.dense()
        H = A.T @ (weights.ravel()[:, None] * A)
        min_eig = float(np.linalg.eigvalsh(H)[0])
        # relative floor: round-off in a singular H
        pd = min_eig > 1e-10 * max(float(np.abs(H).max()), 1e-300)
    else:
        pd = all(q > 0 for q in quotients)

    shape = geom.image_shape
    eps = [dn.estimate_epsilon(model.layers[l - 1], model.layers[l], probe_count,
                               (seed, l), shape, samples, scale)
           for l in range(1, model.n_layers)]
    lips = [dn.estimate_lipschitz(p, probe_count, (seed, 0, l), shape, samples, scale)
            for l, p in enumerate(model.layers)]
    running = list(np.cumsum(eps)) if eps else []
    if not eps or all(e == 0 for e in eps):
        decaying = True
    else:
        third = max(1, len(eps) // 3)
        decaying = float(np.mean(eps[-third:])) <= float(np.mean(eps[:third]))
    return ConvergenceReport(min_eig, quotients, bool(pd), [float(e) for e in eps],
                             [float(s) for s in running], lips, decaying)
