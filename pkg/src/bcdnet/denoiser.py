"""Layer-wise convolutional autoencoder denoiser and its patch-based training.

The denoiser is

    D(x) = (1/R) * sum_k d_k (*)^T T_{exp(alpha_k)}(e_k (*) x)

where ``(*)`` is 2-D cross-correlation with periodic boundaries and
``(*)^T`` is its adjoint (overlap-add of the decoded patches).  With
stride-1 wraparound patch extraction this equals averaging the patch-domain
reconstructions ``D T(E^T X)`` over the ``R`` patches covering each pixel,
so training on patches fits exactly the operator applied to images.

Filters are stored as columns of ``(R, K)`` matrices; column ``k`` reshaped
row-major to ``(r, r)`` is the 2-D filter with center ``(r // 2, r // 2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class AutoencoderParams:
    """One layer's filter banks and log-thresholds.

    Attributes:
        decode: ``(R, K)`` decoding filters ``D``.
        encode: ``(R, K)`` encoding filters ``E``.
        log_thresholds: ``(K,)`` vector ``alpha``; thresholds are ``exp(alpha)``.
    """

    decode: np.ndarray
    encode: np.ndarray
    log_thresholds: np.ndarray

    def __post_init__(self):
        self.decode = np.array(self.decode, dtype=np.float64, ndmin=2)
        self.encode = np.array(self.encode, dtype=np.float64, ndmin=2)
        self.log_thresholds = np.array(self.log_thresholds, dtype=np.float64, ndmin=1)
        R, K = self.decode.shape
        if self.encode.shape != (R, K) or self.log_thresholds.shape != (K,):
            raise ValidationError("decode/encode must be (R, K) and log_thresholds (K,)")
        if not (np.all(np.isfinite(self.decode)) and np.all(np.isfinite(self.encode))
                and np.all(np.isfinite(self.log_thresholds))):
            raise ValidationError("autoencoder parameters must be finite")
        filter_side(R)

    @property
    def n_filters(self) -> int:
        return self.decode.shape[1]

    @property
    def filter_size(self) -> int:
        return self.decode.shape[0]

    @property
    def thresholds(self) -> np.ndarray:
        return np.exp(self.log_thresholds)

    def copy(self) -> "AutoencoderParams":
        return AutoencoderParams(self.decode.copy(), self.encode.copy(),
                                 self.log_thresholds.copy())

    def scaled(self, decode_scale: float) -> "AutoencoderParams":
        return replace(self.copy(), decode=self.decode * decode_scale)


def filter_side(R: int) -> int:
    r = math.isqrt(int(R))
    if r < 1 or r * r != R:
        raise ValidationError(f"filter size R={R} is not a perfect square")
    return r


def identity_params(r: int = 3, log_threshold: float = -30.0) -> AutoencoderParams:
    """Near-identity autoencoder: ``K = R`` delta filters, tiny thresholds."""
    R = r * r
    eye = np.eye(R)
    return AutoencoderParams(eye, eye.copy(), np.full(R, log_threshold))


def init_params(n_filters: int, filter_size: int, rng: np.random.Generator,
                filter_scale: float | None = None, log_threshold: float = math.log(0.01)):
    """I.i.d. Gaussian filters with std ``0.1/sqrt(R)`` by default."""
    filter_side(filter_size)
    if filter_scale is None:
        filter_scale = 0.1 / math.sqrt(filter_size)
    D = rng.normal(0.0, filter_scale, size=(filter_size, n_filters))
    E = rng.normal(0.0, filter_scale, size=(filter_size, n_filters))
    return AutoencoderParams(D, E, np.full(n_filters, float(log_threshold)))


def soft_threshold(u, a):
    """``u - a*sign(u)`` where ``|u| > a``, else 0 (elementwise, broadcasting)."""
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise ValidationError("thresholds must be positive")
    return np.sign(u) * np.maximum(np.abs(u) - a, 0.0)


def _offsets(r: int):
    c = r // 2
    for di in range(r):
        for dj in range(r):
            yield di - c, dj - c


def _shift_stack(img: np.ndarray, r: int) -> np.ndarray:
    """``(R, H, W)`` stack with ``stack[q][p] = img[(p + offset_q) mod dims]``.

    ``stack[:, i, j]`` is the wraparound patch anchored at pixel ``(i, j)``.
    """
    return np.stack([np.roll(img, (-oi, -oj), axis=(0, 1)) for oi, oj in _offsets(r)])


def _overlap_add(stack: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of :func:`_shift_stack`: put each patch element back in place."""
    out = np.zeros(stack.shape[1:])
    for q, (oi, oj) in enumerate(_offsets(r)):
        out += np.roll(stack[q], (oi, oj), axis=(0, 1))
    return out


def _check_filter(filt) -> tuple[np.ndarray, int]:
    filt = np.asarray(filt, dtype=np.float64).ravel()
    r = filter_side(filt.size)
    if r % 2 == 0:
        raise ValidationError("conv_circ needs an odd filter side")
    return filt, r


def conv_circ(img, filt) -> np.ndarray:
    """Periodic cross-correlation (no filter flip) with an odd-sided r x r filter."""
    filt, r = _check_filter(filt)
    img = np.asarray(img, dtype=np.float64)
    return np.tensordot(filt, _shift_stack(img, r), axes=1)


def conv_circ_adjoint(img, filt) -> np.ndarray:
    """Adjoint of :func:`conv_circ` for the same filter."""
    filt, r = _check_filter(filt)
    img = np.asarray(img, dtype=np.float64)
    return _overlap_add(filt[:, None, None] * img[None], r)


def denoise(x, params: AutoencoderParams) -> np.ndarray:
    """Apply the convolutional autoencoder to a 2-D image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValidationError("denoise expects a finite 2-D image")
    R = params.filter_size
    r = filter_side(R)
    patches = _shift_stack(x, r).reshape(R, -1)
    coeffs = soft_threshold(params.encode.T @ patches, params.thresholds[:, None])
    decoded = (params.decode @ coeffs).reshape((R,) + x.shape)
    return _overlap_add(decoded, r) / R


def extract_patches(imgs, r: int, stride: int = 1, wrap: bool = True) -> np.ndarray:
    """Stack vectorized r x r patches of every image as columns (raster order).

    With ``wrap`` the patch anchored at each strided pixel wraps around the
    image edges, matching :func:`conv_circ`.  Without it only fully interior
    footprints are taken.
    """
    if r <= 0 or stride <= 0:
        raise ValidationError("patch size and stride must be positive")
    cols = []
    c = r // 2
    for img in imgs:
        img = np.asarray(img, dtype=np.float64)
        H, W = img.shape
        if r > H or r > W:
            raise ValidationError("patch size exceeds image dimensions")
        if wrap:
            rows, colsj = np.arange(0, H, stride), np.arange(0, W, stride)
        else:
            rows = np.arange(c, H - r + c + 1, stride)
            colsj = np.arange(c, W - r + c + 1, stride)
        stack = _shift_stack(img, r)
        cols.append(stack[:, rows[:, None], colsj[None, :]].reshape(r * r, -1))
    if not cols:
        raise ValidationError("no images given")
    return np.concatenate(cols, axis=1)


def _check_pair(params: AutoencoderParams, target, inp):
    target = np.asarray(target, dtype=np.float64)
    inp = np.asarray(inp, dtype=np.float64)
    if target.shape != inp.shape or target.ndim != 2:
        raise ValidationError("paired patch matrices must share shape (R, P)")
    if target.shape[0] != params.filter_size:
        raise ValidationError("patch size does not match filter size")
    if target.shape[1] == 0:
        raise ValidationError("empty patch set")
    return target, inp


def training_loss(params: AutoencoderParams, target, inp) -> float:
    """``||X - D T_{exp(alpha)}(E^T X_in)||_F^2 / (R * P)``."""
    target, inp = _check_pair(params, target, inp)
    R, P = target.shape
    coeffs = soft_threshold(params.encode.T @ inp, params.thresholds[:, None])
    resid = target - params.decode @ coeffs
    return float(np.sum(resid * resid) / (R * P))


def training_grad(params: AutoencoderParams, target, inp):
    """Gradient of :func:`training_loss` w.r.t. ``(D, E, alpha)``.

    At the threshold kink ``|u| = a`` the zero subgradient is used.
    """
    target, inp = _check_pair(params, target, inp)
    R, P = target.shape
    a = params.thresholds
    z = params.encode.T @ inp
    active = np.abs(z) > a[:, None]
    sgn = np.sign(z) * active
    u = (z - a[:, None] * sgn) * active
    resid = target - params.decode @ u
    g_u = (-2.0 / (R * P)) * (params.decode.T @ resid)
    g_decode = (-2.0 / (R * P)) * (resid @ u.T)
    g_z = g_u * active
    g_encode = inp @ g_z.T
    g_alpha = -np.sum(g_u * sgn, axis=1) * a
    return g_decode, g_encode, g_alpha


@dataclass
class TrainConfig:
    """Mini-batch training hyperparameters for one layer.

    ``init_log_threshold`` is relative to the RMS of the input patches:
    thresholds start at ``exp(init_log_threshold) * rms``.
    """

    batch_size: int = 512
    epochs: int = 200
    lr_filters: float = 1e-3
    lr_thresholds: float = 1e-2
    lr_decay: float = 0.9
    decay_every: int = 10
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_filter_scale: float | None = None
    init_log_threshold: float = math.log(0.01)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValidationError("batch_size, epochs and decay_every must be >= 1")
        if not (self.lr_filters > 0 and self.lr_thresholds > 0):
            raise ValidationError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LayerFit:
    params: AutoencoderParams
    initial_loss: float
    final_loss: float
    epoch_losses: list = field(default_factory=list)


def fit_layer(target, inp, cfg: TrainConfig, n_filters: int | None = None,
              init: AutoencoderParams | None = None) -> LayerFit:
    """Minimize :func:`training_loss` by mini-batch Adam (or SGD).

    Returns the parameters with the lowest full-data loss seen at epoch
    boundaries (the initialization included), so the final loss never
    exceeds the initial one.
    """
    target = np.asarray(target, dtype=np.float64)
    inp = np.asarray(inp, dtype=np.float64)
    if target.ndim != 2 or target.shape != inp.shape:
        raise ValidationError("paired patch matrices must share shape (R, P)")
    R, P = target.shape
    if P == 0:
        raise ValidationError("empty patch set")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        if n_filters is None:
            n_filters = R
        rms = float(np.sqrt(np.mean(inp * inp))) or 1.0
        params = init_params(n_filters, R, rng, cfg.init_filter_scale,
                             cfg.init_log_threshold + math.log(rms))
    else:
        params = init.copy()

    blocks = [params.decode, params.encode, params.log_thresholds]
    base_lr = [cfg.lr_filters, cfg.lr_filters, cfg.lr_thresholds]
    m = [np.zeros_like(b) for b in blocks]
    v = [np.zeros_like(b) for b in blocks]
    step = 0

    best = params.copy()
    initial = best_loss = training_loss(params, target, inp)
    history = [initial]
    for epoch in range(cfg.epochs):
        decay = cfg.lr_decay ** (epoch // cfg.decay_every)
        order = rng.permutation(P)
        for start in range(0, P, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = training_grad(params, target[:, idx], inp[:, idx])
            step += 1
            for b, g, mb, vb, lr in zip(blocks, grads, m, v, base_lr):
                lr = lr * decay
                if cfg.optimizer == "sgd":
                    b -= lr * g
                    continue
                mb *= cfg.adam_beta1
                mb += (1 - cfg.adam_beta1) * g
                vb *= cfg.adam_beta2
                vb += (1 - cfg.adam_beta2) * g * g
                mhat = mb / (1 - cfg.adam_beta1 ** step)
                vhat = vb / (1 - cfg.adam_beta2 ** step)
                b -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        loss = training_loss(params, target, inp)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = params.copy()
        logger.debug("epoch %d loss %.6g", epoch, loss)
    return LayerFit(best, initial, best_loss, history)


def train_layer(target, inp, cfg: TrainConfig, n_filters: int | None = None,
                init: AutoencoderParams | None = None) -> AutoencoderParams:
    return fit_layer(target, inp, cfg, n_filters, init).params


def probe_pairs(probe_count: int, seed, shape=(32, 32), samples=None, scale=None):
    """Deterministic list of probe pairs ``(u, v)``.

    Probes are drawn around ``samples`` (cycled) when given, otherwise
    around zero; ``scale`` sets the perturbation std and defaults to the
    sample std (or 1).  Even-indexed pairs have ``v`` a perturbed copy of
    ``u``; odd-indexed pairs use ``v = u``, which exposes drift between two
    different operators.
    """
    rng = np.random.default_rng(seed)
    if samples is not None:
        samples = [np.asarray(s, dtype=np.float64) for s in samples]
        shape = samples[0].shape
    if scale is None:
        scale = float(np.std(np.stack(samples))) if samples else 1.0
        scale = scale or 1.0
    pairs = []
    for i in range(probe_count):
        base = samples[i % len(samples)] if samples else np.zeros(shape)
        u = base + rng.normal(0.0, scale, size=shape)
        if i % 2:
            v = u.copy()
        else:
            v = u + rng.normal(0.0, scale, size=shape) * 10.0 ** rng.uniform(-3, 0)
        pairs.append((u, v))
    return pairs


def estimate_lipschitz(params: AutoencoderParams, probe_count: int = 32, seed=0,
                       shape=(32, 32), samples=None, scale=None) -> float:
    """Empirical lower bound ``max ||D(u) - D(v)|| / ||u - v||`` over probes."""
    best = 0.0
    for u, v in probe_pairs(2 * probe_count, seed, shape, samples, scale)[::2]:
        du = np.linalg.norm(u - v)
        if du == 0:
            continue
        best = max(best, float(np.linalg.norm(denoise(u, params) - denoise(v, params)) / du))
    return best


def estimate_epsilon(params_prev: AutoencoderParams, params_next: AutoencoderParams,
                     probe_count: int = 32, seed=0, shape=(32, 32), samples=None,
                     scale=None) -> float:
    """Empirical excess ``max(||D_next(u) - D_prev(v)||^2 - ||u - v||^2)``, floored at 0.

    Excesses explained by floating-point round-off count as 0: the computed
    difference ``D(u) - D(v)`` carries an error ``delta`` proportional to
    ``||u|| + ||v||``, so excesses up to ``(||u - v|| + delta)^2 - ||u - v||^2``
    are discarded.
    """
    worst = 0.0
    for u, v in probe_pairs(probe_count, seed, shape, samples, scale):
        lhs = float(np.sum((denoise(u, params_next) - denoise(v, params_prev)) ** 2))
        rhs = float(np.sum((u - v) ** 2))
        excess = lhs - rhs
        delta = 64 * params_next.filter_size * np.finfo(float).eps * (
            np.linalg.norm(u) + np.linalg.norm(v))
        if excess <= 2 * math.sqrt(rhs) * delta + delta * delta:
            continue
        worst = max(worst, excess)
    return worst
