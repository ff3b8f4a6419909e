"""Stochastic localization by Gaussian tilts of a prior.

The process is realized through its tilt representation: ``p_t`` is the
prior reweighted by ``exp(<theta_t, x> - t|x|^2/2)``.  Two moment engines
evaluate the tilted moments:

* ``PoolEngine``: self-normalized importance sampling over a fixed prior
  pool, with delete-a-group jackknife errors;
* ``ProductEngine``: exact coordinatewise moments for product measures.

Ensembles are simulated with either the exact driver ``theta_t = tX + B_t``
or Euler-Maruyama on ``d theta = a dt + dB``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from . import kernels, rng
from .errors import DegenerateTilt, DimensionTooLarge, Divergence, EmptyEnsemble
from .measures import MeasureModel, SamplePool

ESS_FLOOR = 50.0
GAP_FLOOR = 1e-4
MAX_TENSOR_DIM = 6


# ---------------------------------------------------------------------------
# states and engines


@dataclass(frozen=True, eq=False)
class TiltState:
    t: float
    theta: np.ndarray
    barycenter: np.ndarray
    covariance: np.ndarray
    ess: float = math.inf
    third: Optional[np.ndarray] = None  # central third moments, coordinate basis
    barycenter_se: Optional[np.ndarray] = None
    covariance_se: Optional[np.ndarray] = None
    third_se: Optional[np.ndarray] = None


@dataclass(eq=False)
class MomentBatch:
    means: np.ndarray  # (B, n)
    covs: np.ndarray  # (B, n, n)
    ess: np.ndarray  # (B,)
    third: Optional[np.ndarray] = None  # (B, n, n, n)
    means_se: Optional[np.ndarray] = None
    covs_se: Optional[np.ndarray] = None
    third_se: Optional[np.ndarray] = None


def _sym3(d, m2):
    """d_i M_jk + d_j M_ik + d_k M_ij."""
    return (
        np.einsum("i,jk->ijk", d, m2) + np.einsum("j,ik->ijk", d, m2) + np.einsum("k,ij->ijk", d, m2)
    )


def _assemble(W, S1, S2, S3):
    wt = W.sum()
    mean = S1.sum(axis=0) / wt
    cov = S2.sum(axis=0) / wt
    third = None if S3 is None else S3.sum(axis=0) / wt
    return mean, cov, third


def _jackknife(W, S1, S2, S3, mean):
    """Leave-one-group-out estimates of mean, covariance and third moment."""
    G = W.shape[0]
    tot_w, tot1, tot2 = W.sum(), S1.sum(axis=0), S2.sum(axis=0)
    tot3 = None if S3 is None else S3.sum(axis=0)
    means, covs, thirds = [], [], []
    for g in range(G):
        w = tot_w - W[g]
        m = (tot1 - S1[g]) / w
        d = m - mean
        m2 = (tot2 - S2[g]) / w
        means.append(m)
        covs.append(m2 - np.outer(d, d))
        if tot3 is not None:
            m3 = (tot3 - S3[g]) / w
            thirds.append(m3 - _sym3(d, m2) + 2.0 * np.einsum("i,j,k->ijk", d, d, d))
    return np.array(means), np.array(covs), (np.array(thirds) if thirds else None)


def _jk_se(reps):
    G = reps.shape[0]
    return np.sqrt((G - 1) / G * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))


def _jk_bias_corrected(full, reps):
    G = reps.shape[0]
    return G * full - (G - 1) * reps.mean(axis=0)


def posterior_moments(
    pool: SamplePool,
    t: float,
    theta,
    ess_floor: float = ESS_FLOOR,
    n_groups: int = 20,
    third: bool = False,
    bias_correct: bool = False,
) -> TiltState:
    """Self-normalized tilt moments of a prior pool.

    Standard errors come from a delete-a-group jackknife over ``n_groups``
    contiguous blocks of the pool.  With ``bias_correct`` the jackknife
    bias correction is applied to all returned moments.
    """
    X = pool.points
    if X.shape[0] == 0:
        raise ValueError("empty pool")
    theta = np.ascontiguousarray(theta, dtype=np.float64).reshape(X.shape[1])
    if third and X.shape[1] > MAX_TENSOR_DIM:
        raise DimensionTooLarge(f"third moments limited to dim <= {MAX_TENSOR_DIM}")
    G = max(2, min(int(n_groups), X.shape[0]))
    _, W, S1, S2, S3, sumw2 = kernels.tilt_reduce(X, theta, float(t), G, bool(third))
    if not np.isfinite(W.sum()) or W.sum() <= 0.0:
        raise DegenerateTilt(0.0, ess_floor)
    ess = W.sum() ** 2 / sumw2
    if ess < ess_floor:
        raise DegenerateTilt(ess, ess_floor)
    mean, cov, tm = _assemble(W, S1, S2, S3)
    jm, jc, j3 = _jackknife(W, S1, S2, S3, mean)
    if bias_correct:
        mean, cov = _jk_bias_corrected(mean, jm), _jk_bias_corrected(cov, jc)
        if tm is not None:
            tm = _jk_bias_corrected(tm, j3)
    return TiltState(
        t=float(t),
        theta=theta,
        barycenter=mean,
        covariance=0.5 * (cov + cov.T),
        ess=float(ess),
        third=tm,
        barycenter_se=_jk_se(jm),
        covariance_se=_jk_se(jc),
        third_se=None if j3 is None else _jk_se(j3),
    )


class PoolEngine:
    """Importance-sampling engine over one prior pool."""

    name = "pool"
    exact = False

    def __init__(self, pool: SamplePool, ess_floor=ESS_FLOOR, n_groups=20, bias_correct=False):
        self.pool = pool
        self.dim = pool.dim
        self.ess_floor = float(ess_floor)
        self.n_groups = int(n_groups)
        self.bias_correct = bool(bias_correct)

    def batch(self, t, thetas, third=False, with_se=False) -> MomentBatch:
        thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=np.float64)
        if not (third or with_se or self.bias_correct):
            means, covs, ess = kernels.tilt_mean_cov_batch(self.pool.points, thetas, float(t))
            bad = ~(ess >= self.ess_floor)
            if np.any(bad):
                raise DegenerateTilt(float(np.nanmin(np.where(bad, ess, np.inf))), self.ess_floor)
            return MomentBatch(means, covs, ess)
        states = [
            posterior_moments(
                self.pool, t, th, self.ess_floor, self.n_groups, third, self.bias_correct
            )
            for th in thetas
        ]
        return MomentBatch(
            means=np.array([s.barycenter for s in states]),
            covs=np.array([s.covariance for s in states]),
            ess=np.array([s.ess for s in states]),
            third=np.array([s.third for s in states]) if third else None,
            means_se=np.array([s.barycenter_se for s in states]),
            covs_se=np.array([s.covariance_se for s in states]),
            third_se=np.array([s.third_se for s in states]) if third else None,
        )


class ProductEngine:
    """Exact tilt moments of a product measure, one coordinate at a time."""

    name = "product"
    exact = True

    def __init__(self, model: MeasureModel):
        if model.factor is None:
            raise ValueError("product engine needs a product-structured measure")
        self.model = model
        self.factor = model.factor
        self.dim = model.dim

    def batch(self, t, thetas, third=False, with_se=False) -> MomentBatch:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        mean, var, k3 = self.factor.tilt_moments(t, thetas)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise DegenerateTilt(0.0, None)
        B, n = thetas.shape
        idx = np.arange(n)
        covs = np.zeros((B, n, n))
        covs[:, idx, idx] = var
        tm = None
        if third:
            tm = np.zeros((B, n, n, n))
            tm[:, idx, idx, idx] = k3
        z = np.zeros
        return MomentBatch(
            means=mean,
            covs=covs,
            ess=np.full(B, np.inf),
            third=tm,
            means_se=z(mean.shape) if with_se else None,
            covs_se=z(covs.shape) if with_se else None,
            third_se=(z(tm.shape) if third else None) if with_se else None,
        )


def make_engine(model: MeasureModel, pool: Optional[SamplePool] = None, **kw):
    """PoolEngine when a pool is given, else ProductEngine."""
    if pool is not None:
        return PoolEngine(pool, **kw)
    return ProductEngine(model)


def _as_engine(source, model=None):
    if isinstance(source, (PoolEngine, ProductEngine)):
        return source
    if isinstance(source, SamplePool):
        return PoolEngine(source)
    if source is None and model is not None:
        return ProductEngine(model)
    raise TypeError("expected a SamplePool or a moment engine")


# ---------------------------------------------------------------------------
# eigen-decomposition with a deterministic sign convention


def sorted_eigh(mats):
    """Ascending eigenpairs with each eigenvector's first nonzero entry positive."""
    mats = np.asarray(mats)
    lam, vec = np.linalg.eigh(0.5 * (mats + np.swapaxes(mats, -1, -2)))
    tol = 1e-12 * np.max(np.abs(vec), axis=-2, keepdims=True)
    nz = np.abs(vec) > tol
    first = np.argmax(nz, axis=-2)
    lead = np.take_along_axis(vec, first[..., None, :], axis=-2)
    vec = vec * np.where(lead < 0, -1.0, 1.0)
    return lam, vec


# ---------------------------------------------------------------------------
# paths and ensembles


@dataclass(frozen=True)
class ThirdMomentTensor:
    entries: np.ndarray  # u_ijk in the eigenbasis of the covariance
    t: float
    se: Optional[np.ndarray] = None

    def restricted_sum(self, eigenvalues, r):
        """g_{r;k} = sum over lambda_i, lambda_j <= r of |u_ijk|^2, per k."""
        keep = np.asarray(eigenvalues) <= r
        sub = self.entries[np.ix_(keep, keep, np.ones(len(keep), bool))]
        return np.sum(sub * sub, axis=(0, 1))


def to_eigenbasis(third, vecs):
    """Rotate coordinate-basis third moments into eigenvector coordinates."""
    return np.einsum("...abc,...ai,...bj,...ck->...ijk", third, vecs, vecs, vecs, optimize=True)


def third_moment(source, t, theta, model=None) -> ThirdMomentTensor:
    engine = _as_engine(source, model)
    if engine.dim > MAX_TENSOR_DIM:
        raise DimensionTooLarge(f"third moments limited to dim <= {MAX_TENSOR_DIM}")
    mb = engine.batch(t, np.atleast_2d(theta), third=True, with_se=True)
    _, vec = sorted_eigh(mb.covs[0])
    u = to_eigenbasis(mb.third[0], vec)
    se = None
    if mb.third_se is not None:
        # entrywise errors rotate approximately with |e|
        se = to_eigenbasis(mb.third_se[0], np.abs(vec))
    return ThirdMomentTensor(entries=u, t=float(t), se=se)


@dataclass(eq=False)
class Ensemble:
    """Array form of many paths sharing one time grid."""

    times: np.ndarray  # (T,)
    thetas: np.ndarray  # (P, T, n)
    means: np.ndarray  # (P, T, n)
    covs: np.ndarray  # (P, T, n, n)
    ess: np.ndarray  # (P, T)
    driver: str
    base_seed: int
    path_ids: np.ndarray  # (P,)
    third: Optional[np.ndarray] = None  # (P, T, n, n, n)
    means_se: Optional[np.ndarray] = None
    covs_se: Optional[np.ndarray] = None
    third_se: Optional[np.ndarray] = None
    batch: Optional[np.ndarray] = None  # (P,) batch labels for shared pools
    _eig: Optional[tuple] = field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.thetas.shape[0]

    @property
    def dim(self):
        return self.thetas.shape[-1]

    def eig(self):
        if self._eig is None:
            self._eig = sorted_eigh(self.covs)
        return self._eig

    @property
    def eigenvalues(self):
        return self.eig()[0]

    def time_index(self, t, tol=1e-9):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol:
            raise KeyError(f"time {t} not on the grid")
        return k

    def path(self, i) -> "LocalizationPath":
        lam, vec = self.eig()
        return LocalizationPath(
            times=self.times,
            thetas=self.thetas[i],
            means=self.means[i],
            covs=self.covs[i],
            ess=self.ess[i],
            eigenvalues=lam[i],
            eigenvectors=vec[i],
            driver=self.driver,
            seed=self.base_seed,
            path_id=int(self.path_ids[i]),
            third=None if self.third is None else self.third[i],
        )

    def paths(self):
        return [self.path(i) for i in range(self.n_paths)]

    @classmethod
    def from_paths(cls, paths: Sequence["LocalizationPath"]) -> "Ensemble":
        if len(paths) == 0:
            raise EmptyEnsemble("no paths")
        times = paths[0].times
        for p in paths:
            if p.times.shape != times.shape or np.any(p.times != times):
                raise ValueError("paths do not share one time grid")
        third = None
        if all(p.third is not None for p in paths):
            third = np.stack([p.third for p in paths])
        return cls(
            times=np.asarray(times),
            thetas=np.stack([p.thetas for p in paths]),
            means=np.stack([p.means for p in paths]),
            covs=np.stack([p.covs for p in paths]),
            ess=np.stack([p.ess for p in paths]),
            driver=paths[0].driver,
            base_seed=paths[0].seed,
            path_ids=np.array([p.path_id for p in paths]),
            third=third,
        )


@dataclass(eq=False)
class LocalizationPath:
    times: np.ndarray
    thetas: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    ess: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    driver: str
    seed: int
    path_id: int = 0
    third: Optional[np.ndarray] = None

    @property
    def states(self):
        return [
            TiltState(
                t=float(t),
                theta=self.thetas[k],
                barycenter=self.means[k],
                covariance=self.covs[k],
                ess=float(self.ess[k]),
                third=None if self.third is None else self.third[k],
            )
            for k, t in enumerate(self.times)
        ]


def _ensemble(
    times, thetas, mb_list, driver, base_seed, ids, third, batch=None
) -> Ensemble:
    def stack(attr):
        vals = [getattr(mb, attr) for mb in mb_list]
        if any(v is None for v in vals):
            return None
        return np.stack(vals, axis=1)

    return Ensemble(
        times=np.asarray(times, dtype=float),
        thetas=thetas,
        means=stack("means"),
        covs=stack("covs"),
        ess=stack("ess"),
        driver=driver,
        base_seed=int(base_seed),
        path_ids=np.asarray(ids),
        third=stack("third") if third else None,
        means_se=stack("means_se"),
        covs_se=stack("covs_se"),
        third_se=stack("third_se") if third else None,
        batch=batch,
    )


def _check_grid(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be increasing and start at 0")
    return times


def exact_thetas(model: MeasureModel, times, base_seed, path_ids):
    """theta_t = tX + B_t on the grid for each path id, stream per path."""
    times = _check_grid(times)
    n = model.dim
    dts = np.diff(times)
    out = np.empty((len(path_ids), len(times), n))
    for row, pid in enumerate(path_ids):
        gen = rng.generator(base_seed, pid)
        x = model.draw(1, gen)[0]
        inc = gen.standard_normal((len(dts), n)) * np.sqrt(dts)[:, None]
        b = np.vstack([np.zeros((1, n)), np.cumsum(inc, axis=0)])
        out[row] = times[:, None] * x + b
    return out


def simulate_exact(
    model, engine, times, n_paths, base_seed, third=False, with_se=False, path_offset=0, block=2048
) -> Ensemble:
    """Ensemble of exact-driver paths, evaluated at every grid time."""
    engine = _as_engine(engine, model)
    times = _check_grid(times)
    ids = np.arange(path_offset, path_offset + n_paths)
    thetas = np.empty((n_paths, len(times), model.dim))
    for lo in range(0, n_paths, block):
        thetas[lo : lo + block] = exact_thetas(model, times, base_seed, ids[lo : lo + block])
    mbs = [engine.batch(t, thetas[:, k], third=third, with_se=with_se) for k, t in enumerate(times)]
    return _ensemble(times, thetas, mbs, "TiltExact", base_seed, ids, third)


def simulate_em(
    model, engine, dt, t_end, n_paths, base_seed, record_times=None, third=False,
    with_se=False, path_offset=0,
) -> Ensemble:
    """Euler-Maruyama ensemble; states kept at ``record_times`` (snapped to steps)."""
    if not (0.0 < dt <= t_end):
        raise ValueError("need 0 < dt <= t_end")
    engine = _as_engine(engine, model)
    steps = int(round(t_end / dt))
    if record_times is None:
        rec_idx = np.arange(steps + 1)
    else:
        rec_idx = np.unique(np.rint(np.asarray(record_times) / dt).astype(int))
        if rec_idx.min() < 0 or rec_idx.max() > steps:
            raise ValueError("record time outside [0, t_end]")
    n = model.dim
    ids = np.arange(path_offset, path_offset + n_paths)
    rec_pos = {int(k): j for j, k in enumerate(rec_idx)}
    thetas = np.empty((n_paths, len(rec_idx), n))
    block = max(1, int(2_000_000 // max(1, steps * n)))
    sq = math.sqrt(dt)
    for lo in range(0, n_paths, block):
        hi = min(n_paths, lo + block)
        noise = np.stack([rng.generator(base_seed, pid).standard_normal((steps, n)) for pid in ids[lo:hi]])
        th = np.zeros((hi - lo, n))
        for k in range(steps + 1):
            if k in rec_pos:
                thetas[lo:hi, rec_pos[k]] = th
            if k == steps:
                break
            a = engine.batch(k * dt, th).means
            th = th + a * dt + sq * noise[:, k]
            if not np.all(np.isfinite(th)):
                raise Divergence(k + 1)
    times = rec_idx * dt
    mbs = [engine.batch(t, thetas[:, j], third=third, with_se=with_se) for j, t in enumerate(times)]
    return _ensemble(times, thetas, mbs, "EulerMaruyama", base_seed, ids, third)


def drive_tilt_exact(model, pool, times, seed, path_index=0, third=False) -> LocalizationPath:
    """One exact-driver path; ``pool=None`` uses the product engine."""
    ens = simulate_exact(model, _as_engine(pool, model), times, 1, seed, third=third, path_offset=path_index)
    return ens.path(0)


def drive_sde(model, pool, dt, t_end, seed, path_index=0, third=False) -> LocalizationPath:
    """One Euler-Maruyama path recorded at every step."""
    ens = simulate_em(model, _as_engine(pool, model), dt, t_end, 1, seed, third=third, path_offset=path_index)
    return ens.path(0)


# ---------------------------------------------------------------------------
# statistics


def _as_ensemble(paths):
    if isinstance(paths, Ensemble):
        if paths.n_paths == 0:
            raise EmptyEnsemble("no paths")
        return paths
    return Ensemble.from_paths(list(paths))


def path_mean_se(values, batch=None):
    """Fixed-order compensated mean over axis 0 with its standard error.

    With ``batch`` labels the error comes from the spread of batch means,
    which is the honest error when batches share a random pool.
    """
    v = np.asarray(values, dtype=float)
    P = v.shape[0]
    if P == 0:
        raise EmptyEnsemble("no paths")
    flat = np.ascontiguousarray(v.reshape(P, -1))
    mean = kernels.neumaier_sum(flat) / P
    if batch is None:
        if P < 2:
            se = np.zeros_like(mean)
        else:
            dev = np.ascontiguousarray((flat - mean) ** 2)
            se = np.sqrt(kernels.neumaier_sum(dev) / (P - 1) / P)
    else:
        labels = np.unique(batch)
        bm = np.array([flat[batch == b].mean(axis=0) for b in labels])
        se = bm.std(axis=0, ddof=1) / math.sqrt(len(labels))
    return mean.reshape(v.shape[1:]), se.reshape(v.shape[1:])


def path_observables(ens: Ensemble):
    """Per-path, per-time scalar observables."""
    a2 = np.einsum("ptj,ptj->pt", ens.means, ens.means)
    trA = np.einsum("ptjj->pt", ens.covs)
    trA2 = np.einsum("ptjk,ptkj->pt", ens.covs, ens.covs)
    return {"a_norm_sq": a2, "tr_A": trA, "tr_A_sq": trA2, "second_moment": trA + a2}


def ensemble_stats(paths, hooks: Optional[dict] = None, bins=None, batch=None):
    """Per-time ensemble averages with standard errors.

    ``hooks`` maps names to callables ``g(eigenvalues) -> per-path values``
    (e.g. an F-functional), averaged like the built-in observables.
    """
    ens = _as_ensemble(paths)
    batch = ens.batch if batch is None else batch
    obs = path_observables(ens)
    lam = ens.eigenvalues
    for name, g in (hooks or {}).items():
        obs[name] = np.asarray(g(lam))
    out = {"times": ens.times.copy(), "n_paths": ens.n_paths}
    for name, v in obs.items():
        m, se = path_mean_se(v, batch)
        out[name] = m
        out[name + "_se"] = se
    if bins is None:
        bins = np.linspace(0.0, max(1.0, float(np.max(lam)) * 1.0001), 41)
    out["eigen_bins"] = np.asarray(bins)
    out["eigen_hist"] = np.array([np.histogram(lam[:, k].ravel(), bins=bins)[0] for k in range(len(ens.times))])
    return out


def _centered_triples(times, delta, t_range=None):
    """Grid indices (k-, k, k+) with t_{k+-} = t_k +- delta."""
    out = []
    for k, t in enumerate(times):
        if t_range is not None and not (t_range[0] - 1e-12 <= t <= t_range[1] + 1e-12):
            continue
        lo = np.flatnonzero(np.abs(times - (t - delta)) < 1e-9)
        hi = np.flatnonzero(np.abs(times - (t + delta)) < 1e-9)
        if lo.size and hi.size:
            out.append((int(lo[0]), k, int(hi[0])))
    return out


def derivative_identity_check(paths, delta, t_range=(0.1, 1.0), rel_tol=0.05, n_se=3.0):
    """Centered difference of E|a_t|^2 against E Tr(A_t^2)."""
    ens = _as_ensemble(paths)
    obs = path_observables(ens)
    rows = []
    for lo, k, hi in _centered_triples(ens.times, delta, t_range):
        fd = (obs["a_norm_sq"][:, hi] - obs["a_norm_sq"][:, lo]) / (ens.times[hi] - ens.times[lo])
        (m_fd, se_fd) = path_mean_se(fd, ens.batch)
        (m_tr, _) = path_mean_se(obs["tr_A_sq"][:, k], ens.batch)
        _, se = path_mean_se(fd - obs["tr_A_sq"][:, k], ens.batch)
        tol = max(rel_tol * abs(m_tr), n_se * se)
        rows.append(
            dict(t=float(ens.times[k]), lhs=float(m_fd), rhs=float(m_tr), se=float(se), tol=float(tol),
                 passed=bool(abs(m_fd - m_tr) <= tol))
        )
    return {"rows": rows, "passed": bool(rows) and all(r["passed"] for r in rows)}


def martingale_checks(paths, delta=None, n_se=3.0, abs_floor=1e-10):
    """Conservation of E int |x|^2 dp_t and the drift of E A_t.

    (i) E[Tr A_t + |a_t|^2] against n at every grid time.
    (ii) centered difference (E A_{t+d} - E A_{t-d}) / 2d against -E[A_t^2],
    entrywise, with errors from the per-path combined variable plus a
    truncation allowance; needs grid times t +- 2d as well.
    """
    ens = _as_ensemble(paths)
    n = ens.dim
    obs = path_observables(ens)
    cons = []
    for k, t in enumerate(ens.times):
        m, se = path_mean_se(obs["second_moment"][:, k], ens.batch)
        tol = n_se * float(se) + abs_floor * n
        cons.append(dict(t=float(t), value=float(m), target=float(n), se=float(se),
                         passed=bool(abs(m - n) <= tol)))
    drift = []
    if delta is not None:
        A2 = np.einsum("ptij,ptjk->ptik", ens.covs, ens.covs)
        wide = {k: (lo, hi) for lo, k, hi in _centered_triples(ens.times, 2 * delta)}
        for lo, k, hi in _centered_triples(ens.times, delta):
            if k not in wide:
                continue
            fd = (ens.covs[:, hi] - ens.covs[:, lo]) / (ens.times[hi] - ens.times[lo])
            wl, wh = wide[k]
            fd2 = (ens.covs[:, wh] - ens.covs[:, wl]) / (ens.times[wh] - ens.times[wl])
            comb = fd + A2[:, k]
            m_fd, _ = path_mean_se(fd, ens.batch)
            m_a2, _ = path_mean_se(A2[:, k], ens.batch)
            m_c, se_c = path_mean_se(comb, ens.batch)
            # O(delta^2) truncation of the centered difference, estimated from
            # the 2 delta stencil (error ratio 4) with a factor 2 of safety
            trunc = 2.0 * np.abs(path_mean_se(fd2 - fd, ens.batch)[0]) / 3.0
            ok = np.abs(m_c) <= n_se * se_c + trunc + abs_floor
            drift.append(dict(t=float(ens.times[k]), fd=m_fd, minus_A2=-m_a2, se=se_c, trunc=trunc,
                              passed=bool(np.all(ok))))
    passed = all(r["passed"] for r in cons) and all(r["passed"] for r in drift)
    return {"conservation": cons, "drift": drift, "passed": passed}


def identity_fn():
    """f(x) = x with its derivatives, in the AssistFn evaluation protocol."""
    class _Id:
        def value(self, x):
            return np.asarray(x, dtype=float)

        def d1(self, x):
            return np.ones_like(np.asarray(x, dtype=float))

        def d2(self, x):
            return np.zeros_like(np.asarray(x, dtype=float))

    return _Id()


def quadratic_fn():
    """f(x) = x^2, a test function with a nonzero triple-sum term."""
    class _Sq:
        def value(self, x):
            x = np.asarray(x, dtype=float)
            return x * x

        def d1(self, x):
            return 2.0 * np.asarray(x, dtype=float)

        def d2(self, x):
            return np.full_like(np.asarray(x, dtype=float), 2.0)

    return _Sq()


def divided_differences(lam, f, gap_floor=GAP_FLOOR):
    """(f'(l_i) - f'(l_j)) / (l_i - l_j), replaced by f''(l_i) near ties.

    Returns the matrix and the count of replaced off-diagonal pairs.
    """
    lam = np.asarray(lam, dtype=float)
    d1 = f.d1(lam)
    d2 = f.d2(lam)
    gap = lam[..., :, None] - lam[..., None, :]
    close = np.abs(gap) < gap_floor
    with np.errstate(divide="ignore", invalid="ignore"):
        dd = (d1[..., :, None] - d1[..., None, :]) / gap
    dd = np.where(close, d2[..., :, None] * np.ones_like(gap), dd)
    n = lam.shape[-1]
    near = int(np.sum(close)) - int(np.prod(lam.shape[:-1], dtype=int)) * n
    return dd, near // 2


def drift_terms(lam, u, f, gap_floor=GAP_FLOOR):
    """(-sum lambda^2 f'(lambda), M_t) for eigenvalues and eigenbasis tensors."""
    dd, near = divided_differences(lam, f, gap_floor)
    lead = -np.sum(lam * lam * f.d1(lam), axis=-1)
    M = 0.5 * np.einsum("...ijk,...ij->...", u * u, dd)
    return lead, M, near


def eigen_drift_check(paths, f=None, delta=None, gap_floor=GAP_FLOOR, rel_tol=0.10, n_se=3.0):
    """Finite-difference drift of E F_t against the eigenvalue-SDE drift.

    Near-ties use the continuity convention (f'' on the diagonal) and are
    counted rather than skipped.
    """
    ens = _as_ensemble(paths)
    if ens.dim > 4:
        raise DimensionTooLarge("eigen drift check limited to dim <= 4")
    if ens.third is None:
        raise ValueError("ensemble was simulated without third moments")
    f = identity_fn() if f is None else f
    lam, vec = ens.eig()
    F = np.sum(f.value(np.maximum(lam, 0.0)), axis=-1)
    rows = []
    triples = _centered_triples(ens.times, delta) if delta else []
    for lo, k, hi in triples:
        u = to_eigenbasis(ens.third[:, k], vec[:, k])
        lead, M, near = drift_terms(lam[:, k], u, f, gap_floor)
        fd = (F[:, hi] - F[:, lo]) / (ens.times[hi] - ens.times[lo])
        m_fd, _ = path_mean_se(fd, ens.batch)
        m_dr, _ = path_mean_se(lead + M, ens.batch)
        m_M, _ = path_mean_se(M, ens.batch)
        _, se = path_mean_se(fd - lead - M, ens.batch)
        tol = max(rel_tol * abs(m_dr), n_se * se)
        rows.append(dict(t=float(ens.times[k]), fd=float(m_fd), drift=float(m_dr), M=float(m_M),
                         se=float(se), near_ties=near, passed=bool(abs(m_fd - m_dr) <= tol)))
    return {"rows": rows, "passed": bool(rows) and all(r["passed"] for r in rows)}


def moment_bound_check(paths, r, t=None, n_se=3.0):
    """Restricted third-moment sums against 4 t^{-1/2} r^{3/2} lambda_k.

    A violation is an excess over the bound by more than ``n_se`` jackknife
    errors of the left side (zero error for exact engines).
    """
    ens = _as_ensemble(paths)
    if ens.third is None:
        raise ValueError("ensemble was simulated without third moments")
    lam, vec = ens.eig()
    idx = [ens.time_index(t)] if t is not None else [k for k, s in enumerate(ens.times) if s > 0]
    rows = []
    for k in idx:
        tk = float(ens.times[k])
        u = to_eigenbasis(ens.third[:, k], vec[:, k])
        keep = (lam[:, k] <= r).astype(float)
        mask = keep[:, :, None] * keep[:, None, :]
        lhs = np.einsum("pijk,pij->pk", u * u, mask)
        if ens.third_se is not None:
            use = to_eigenbasis(ens.third_se[:, k], np.abs(vec[:, k]))
            lhs_se = 2.0 * np.sqrt(np.einsum("pijk,pij->pk", (u * use) ** 2, mask))
        else:
            lhs_se = np.zeros_like(lhs)
        bound = 4.0 * tk**-0.5 * r**1.5 * lam[:, k]
        viol = lhs - n_se * lhs_se > bound
        rows.append(dict(t=tk, violations=int(np.sum(viol)), max_ratio=float(np.max(lhs / bound)),
                         passed=not bool(np.any(viol))))
    return {"r": r, "rows": rows, "passed": all(x["passed"] for x in rows)}


def lichnerowicz_check(paths, n_se=5.0, rel_floor=1e-12):
    """Largest covariance eigenvalue against 1/t for t > 0."""
    ens = _as_ensemble(paths)
    lam = ens.eigenvalues
    rows = []
    for k, t in enumerate(ens.times):
        if t <= 0:
            continue
        top = lam[:, k, -1]
        se = np.zeros_like(top)
        if ens.covs_se is not None:
            se = np.max(ens.covs_se[:, k].reshape(ens.n_paths, -1), axis=1) * ens.dim
        viol = top - n_se * se > (1.0 / t) * (1.0 + rel_floor)
        rows.append(dict(t=float(t), max_lambda=float(top.max()), cap=1.0 / t, violations=int(viol.sum()),
                         passed=not bool(viol.any())))
    return {"rows": rows, "passed": all(x["passed"] for x in rows)}


def band_check(paths, t_max=0.05):
    """n/2 <= E Tr(A_t^2) <= 8n and tn/2 <= E|a_t|^2 <= 8tn for small t."""
    ens = _as_ensemble(paths)
    n = ens.dim
    st = ensemble_stats(ens)
    rows = []
    for k, t in enumerate(st["times"]):
        if t > t_max:
            continue
        tr2 = float(st["tr_A_sq"][k])
        a2 = float(st["a_norm_sq"][k])
        ok = n / 2 <= tr2 <= 8 * n and t * n / 2 - 1e-12 <= a2 <= 8 * t * n + 1e-12
        rows.append(dict(t=float(t), tr_A_sq=tr2, a_norm_sq=a2, passed=bool(ok)))
    return {"rows": rows, "passed": all(x["passed"] for x in rows)}


def wilson_interval(k, n, z=None):
    if n == 0:
        return (0.0, 1.0)
    z = stats.norm.ppf(0.975) if z is None else z
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # the endpoints are exact at k = 0 and k = n; rounding would leave ~1e-18
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return (lo, hi)


def opnorm_tail(paths, C2=1.0, level=2.0):
    """Empirical P(||A_t||_op >= 2) with Wilson intervals; diagnostic only."""
    ens = _as_ensemble(paths)
    lam = ens.eigenvalues
    rows = []
    for k, t in enumerate(ens.times):
        hits = int(np.sum(lam[:, k, -1] >= level))
        lo, hi = wilson_interval(hits, ens.n_paths)
        bound = math.exp(-1.0 / (C2 * t)) if t > 0 else 0.0
        rows.append(dict(t=float(t), frequency=hits / ens.n_paths, lo=lo, hi=hi, bound=bound))
    return {"rows": rows, "diagnostic": True}


def ks_driver_check(sample_a, sample_b, alpha=0.01):
    """Two-sample Kolmogorov-Smirnov test; pass when not rejected at ``alpha``."""
    res = stats.ks_2samp(np.asarray(sample_a), np.asarray(sample_b))
    return {"statistic": float(res.statistic), "pvalue": float(res.pvalue), "passed": bool(res.pvalue > alpha)}


def write_paths_csv(paths, fh):
    """Columns time, path_id, a_norm_sq, tr_A, tr_A_sq, lambda_1..lambda_n."""
    ens = _as_ensemble(paths)
    obs = path_observables(ens)
    lam = ens.eigenvalues
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "path_id", "a_norm_sq", "tr_A", "tr_A_sq"] + [f"lambda_{i + 1}" for i in range(ens.dim)])
    for p in range(ens.n_paths):
        for k, t in enumerate(ens.times):
            row = [t, int(ens.path_ids[p]), obs["a_norm_sq"][p, k], obs["tr_A"][p, k], obs["tr_A_sq"][p, k]]
            row += list(lam[p, k])
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
