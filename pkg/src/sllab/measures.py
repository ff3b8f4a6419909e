"""Catalog of isotropic log-concave test measures.

Each catalog entry is a product of identical one-dimensional factors.  A
factor knows its log-density, exact sampler, raw moments and how to
integrate against its Gaussian tilts ``exp(theta*x - t*x^2/2)``; product
structure then gives exact n-dimensional posterior moments coordinatewise.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import erfcx

from . import rng
from .errors import InvalidDimension

SQRT3 = math.sqrt(3.0)
_LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _composite_gl(lo, hi, panels, order):
    """Nodes and weights of composite Gauss-Legendre on broadcast intervals."""
    x, w = leggauss(order)
    lo = np.asarray(lo, dtype=float)[..., None, None]
    hi = np.asarray(hi, dtype=float)[..., None, None]
    h = (hi - lo) / panels
    left = lo + h * np.arange(panels)[:, None]
    nodes = left + 0.5 * h * (x + 1.0)
    weights = 0.5 * h * w * np.ones_like(nodes)
    shape = nodes.shape[:-2] + (panels * order,)
    return nodes.reshape(shape), weights.reshape(shape)


def _weighted_moments(logw, x):
    """Mean, variance and third central moment for log-weights on nodes."""
    logw = logw - np.max(logw, axis=-1, keepdims=True)
    p = np.exp(logw)
    p /= p.sum(axis=-1, keepdims=True)
    mean = np.sum(p * x, axis=-1)
    d = x - mean[..., None]
    var = np.sum(p * d * d, axis=-1)
    k3 = np.sum(p * d * d * d, axis=-1)
    return mean, var, k3


class Factor:
    """One-dimensional isotropic log-concave factor."""

    name = "factor"
    lo = -math.inf
    hi = math.inf
    m3 = 0.0  # E x^3
    m4 = 3.0  # E x^4
    spectral_gap: Optional[float] = None
    spectral_window = (-8.0, 8.0)
    smooth = True

    def log_pdf(self, x):
        raise NotImplementedError

    def dlog(self, x):
        raise NotImplementedError

    def d2log(self, x):
        raise NotImplementedError

    def sample(self, gen, shape):
        raise NotImplementedError

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    @property
    def var_sq(self):
        """Var(x^2) for one coordinate."""
        return self.m4 - 1.0

    def tilt_moments(self, t, theta):
        """Mean, variance and third central moment of the tilted factor.

        ``theta`` may have any shape; outputs share it.
        """
        theta = np.asarray(theta, dtype=float)
        flat = theta.reshape(-1)
        out = self._tilt_moments(float(t), flat)
        return tuple(np.asarray(o).reshape(theta.shape) for o in out)

    def _tilt_moments(self, t, theta):
        raise NotImplementedError

    def expect(self, u, t, theta, panels=32, order=16):
        """``int u dp`` under the tilt, by composite Gauss-Legendre.

        The window is the support cut to 40 tilted standard deviations
        around the tilted mean.
        """
        theta = np.asarray(theta, dtype=float)
        mean, var, _ = self.tilt_moments(t, theta)
        sd = np.sqrt(np.maximum(var, 0.0))
        a = np.maximum(self.lo, mean - 40.0 * sd)
        b = np.minimum(self.hi, mean + 40.0 * sd)
        x, w = _composite_gl(a, b, panels, order)
        lw = self.log_pdf(x) + theta[..., None] * x - 0.5 * t * x * x + np.log(w)
        lw -= np.max(lw, axis=-1, keepdims=True)
        p = np.exp(lw)
        return np.sum(p * u(x), axis=-1) / np.sum(p, axis=-1)


class GaussianFactor(Factor):
    name = "gaussian"
    m4 = 3.0
    spectral_gap = 1.0
    spectral_window = (-8.0, 8.0)
    _gh = hermegauss(120)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * x * x - 0.5 * _LOG_2PI

    def dlog(self, x):
        return -np.asarray(x, dtype=float)

    def d2log(self, x):
        return -np.ones_like(np.asarray(x, dtype=float))

    def sample(self, gen, shape):
        return gen.standard_normal(shape)

    def _tilt_moments(self, t, theta):
        # Gauss-Hermite for the combined quadratic weight exp(-(1+t)x^2/2);
        # only the linear part of the tilt stays in the integrand
        y, w = self._gh
        scale = 1.0 / math.sqrt(1.0 + t)
        x = y * scale
        theta = np.asarray(theta, dtype=float)
        lw = np.log(w) + theta[..., None] * x
        mean, var, k3 = _weighted_moments(lw, x)
        far = np.abs(theta) * scale > 12.0
        if np.any(far):
            # tilt pushes mass past the Hermite nodes: Newton for the mode of
            # the tilted log-density, then Gauss-Legendre around it
            th = theta[far]
            mode = np.zeros_like(th)
            for _ in range(3):
                g = self.dlog(mode) + th - t * mode
                h = self.d2log(mode) - t
                mode = mode - g / h
            half = 40.0 / np.sqrt(-(self.d2log(mode) - t))
            xn, wn = _composite_gl(mode - half, mode + half, 32, 16)
            lwn = self.log_pdf(xn) + th[..., None] * xn - 0.5 * t * xn * xn + np.log(wn)
            mean[far], var[far], k3[far] = _weighted_moments(lwn, xn)
        return mean, var, k3


class ExponentialFactor(Factor):
    """Centered standard exponential: density exp(-(x+1)) on x >= -1."""

    name = "exponential"
    lo = -1.0
    m3 = 2.0
    m4 = 9.0
    spectral_gap = 0.25
    spectral_window = (-1.0, 199.0)
    smooth = False
    _CF_DEPTH = 64
    _CF_SWITCH = 3.0

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            return np.where(x >= -1.0, -(x + 1.0), -np.inf)

    def dlog(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= -1.0, -1.0, np.nan)

    def d2log(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= -1.0, 0.0, np.nan)

    def sample(self, gen, shape):
        return gen.standard_exponential(shape) - 1.0

    def _tilt_moments(self, t, theta):
        # z = x + 1 >= 0 has density proportional to exp(-beta z - t z^2 / 2)
        theta = np.asarray(theta, dtype=float)
        beta = 1.0 - theta - t
        if t == 0.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = np.where(beta > 0.0, 1.0 / beta, np.nan)
            return inv - 1.0, inv * inv, 2.0 * inv**3
        sig = np.float64(1.0 / math.sqrt(t))  # numpy scalar: overflow gives inf, not an exception
        alpha = beta * sig
        mean = np.empty_like(alpha)
        var = np.empty_like(alpha)
        k3 = np.empty_like(alpha)

        far = alpha >= self._CF_SWITCH
        if np.any(far):
            # backward continued fraction r_k = k / (alpha + r_{k+1}); avoids the
            # cancellation in lambda - alpha for large alpha
            a = alpha[far]
            r_next = np.zeros_like(a)
            rs = {}
            for k in range(self._CF_DEPTH, 0, -1):
                r_next = k / (a + r_next)
                if k <= 3:
                    rs[k] = r_next
            c, d, e = rs[1], rs[2], rs[3]
            lam = a + c
            mean[far] = sig * c
            var[far] = sig**2 * c * (d - c)
            k3[far] = sig**3 * lam * c * c * d * (e - d)

        near = ~far
        if np.any(near):
            a = alpha[near]
            lam = math.sqrt(2.0 / math.pi) / erfcx(a / math.sqrt(2.0))
            mean[near] = sig * (lam - a)
            var[near] = sig**2 * (1.0 + a * lam - lam * lam)
            k3[near] = sig**3 * lam * (2.0 * lam * lam - 3.0 * a * lam + a * a - 1.0)
        return mean - 1.0, var, k3


class CubeFactor(Factor):
    """Uniform on [-sqrt 3, sqrt 3]."""

    name = "cube"
    lo = -SQRT3
    hi = SQRT3
    m4 = 9.0 / 5.0
    spectral_gap = math.pi**2 / 12.0
    spectral_window = (-SQRT3, SQRT3)
    smooth = False
    _nodes, _weights = _composite_gl(-SQRT3, SQRT3, 16, 16)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= -SQRT3) & (x <= SQRT3)
        return np.where(inside, -math.log(2.0 * SQRT3), -np.inf)

    def dlog(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x) <= SQRT3, 0.0, np.nan)

    def d2log(self, x):
        return self.dlog(x)

    def sample(self, gen, shape):
        return gen.uniform(-SQRT3, SQRT3, shape)

    def _tilt_moments(self, t, theta):
        x, w = self._nodes, self._weights
        lw = np.log(w) + theta[..., None] * x - 0.5 * t * x * x
        return _weighted_moments(lw, x)


@dataclass(frozen=True)
class ClosedFormOracle:
    posterior_mean: Optional[Callable] = None
    posterior_cov: Optional[Callable] = None
    var_norm_sq: Optional[float] = None
    spectral_gap: Optional[float] = None


@dataclass(frozen=True)
class MeasureModel:
    """An isotropic log-concave measure on R^dim."""

    key: str
    dim: int
    log_density: Callable
    grad_log_density: Callable
    hessian_log_density: Optional[Callable]
    oracle: Optional[ClosedFormOracle] = None
    factor: Optional[Factor] = None
    log_normalizer: Optional[float] = None

    def sampler(self, seed):
        """One exact sample, deterministic in ``seed``."""
        return self.draw(1, rng.generator(seed))[0]

    def draw(self, count, gen):
        return self.factor.sample(gen, (int(count), self.dim))


def _product_model(factor: Factor, dim: int, oracle: ClosedFormOracle) -> MeasureModel:
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise InvalidDimension(f"dimension must be a positive integer, got {dim!r}")
    dim = int(dim)

    def log_density(x):
        return np.sum(factor.log_pdf(np.asarray(x, dtype=float)), axis=-1)

    def grad_log_density(x):
        return factor.dlog(np.asarray(x, dtype=float))

    def hessian_log_density(x):
        d = factor.d2log(np.asarray(x, dtype=float))
        return d[..., :, None] * np.eye(dim)

    return MeasureModel(
        key=factor.name,
        dim=dim,
        log_density=log_density,
        grad_log_density=grad_log_density,
        hessian_log_density=hessian_log_density,
        oracle=oracle,
        factor=factor,
        log_normalizer=0.0,
    )


def make_gaussian(dim: int) -> MeasureModel:
    eye = np.eye(dim) if isinstance(dim, (int, np.integer)) and dim >= 1 else None
    oracle = ClosedFormOracle(
        posterior_mean=lambda t, theta: np.asarray(theta, dtype=float) / (1.0 + t),
        posterior_cov=lambda t, theta: eye / (1.0 + t),
        var_norm_sq=2.0 * dim,
        spectral_gap=1.0,
    )
    return _product_model(GaussianFactor(), dim, oracle)


def make_product_exponential(dim: int) -> MeasureModel:
    return _product_model(
        ExponentialFactor(), dim, ClosedFormOracle(var_norm_sq=8.0 * dim, spectral_gap=0.25)
    )


def make_uniform_cube(dim: int) -> MeasureModel:
    return _product_model(
        CubeFactor(), dim, ClosedFormOracle(var_norm_sq=0.8 * dim, spectral_gap=math.pi**2 / 12.0)
    )


_REGISTRY: dict[str, Callable[[int], MeasureModel]] = {
    "gaussian": make_gaussian,
    "exponential": make_product_exponential,
    "cube": make_uniform_cube,
}


def register_measure(key: str, factory: Callable[[int], MeasureModel], replace=False):
    """Add a catalog entry; ``factory(dim)`` must return a MeasureModel."""
    if key in _REGISTRY and not replace:
        raise KeyError(f"measure {key!r} already registered")
    _REGISTRY[key] = factory


def catalog():
    return sorted(_REGISTRY)


def make_measure(key: str, dim: int) -> MeasureModel:
    try:
        factory = _REGISTRY[key]
    except KeyError:
        raise KeyError(f"unknown measure {key!r}; known: {', '.join(catalog())}") from None
    return factory(dim)


@dataclass(frozen=True, eq=False)
class SamplePool:
    points: np.ndarray
    count: int
    seed: int
    key: str = field(default="")

    def __post_init__(self):
        if self.points.shape[0] != self.count:
            raise ValueError("count does not match number of points")

    @property
    def dim(self):
        return self.points.shape[1]


def draw_pool(model: MeasureModel, count: int, seed: int) -> SamplePool:
    if count < 1:
        raise ValueError("pool count must be >= 1")
    pts = np.ascontiguousarray(model.draw(count, rng.generator(seed, 0)))
    pts.setflags(write=False)
    return SamplePool(points=pts, count=int(count), seed=int(seed) & rng.MASK64, key=model.key)


POOL_MAGIC = b"SLPOOL1"
_HEADER = struct.Struct("<QQQ")


def save_pool(pool: SamplePool, path) -> None:
    with open(path, "wb") as fh:
        fh.write(POOL_MAGIC)
        fh.write(_HEADER.pack(pool.dim, pool.count, pool.seed))
        fh.write(np.ascontiguousarray(pool.points, dtype="<f8").tobytes())


def load_pool(path) -> SamplePool:
    raw = Path(path).read_bytes()
    if raw[: len(POOL_MAGIC)] != POOL_MAGIC:
        raise ValueError("not a sample pool file")
    off = len(POOL_MAGIC)
    dim, count, seed = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    body = np.frombuffer(raw, dtype="<f8", offset=off)
    if body.size != dim * count:
        raise ValueError("truncated pool file")
    pts = body.astype(np.float64).reshape(count, dim)
    pts.setflags(write=False)
    return SamplePool(points=pts, count=int(count), seed=int(seed))
