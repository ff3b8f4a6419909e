"""Spectral analysis of one-dimensional generators L u = rho^{-1} (rho u')'.

The generator is discretized on a cell-centred grid in divergence form:
cell masses w_j = rho_j h and face conductances rho_{j+1/2} / h give a
Dirichlet form K and the generalized problem K v = lam W v, solved as the
symmetric tridiagonal matrix W^{-1/2} K W^{-1/2}.  No flux leaves the end
faces, so constants are exact eigenfunctions.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal, solve_banded
from scipy.sparse import diags
from scipy.sparse.linalg import LinearOperator, lobpcg
from scipy.special import logsumexp

from .errors import HypothesisViolation, PreconditionViolation, ResolutionError
from .heatflow import _fd2


@dataclass(frozen=True, eq=False)
class Density1D:
    """Log-density tabulated at cell centres and faces of a uniform grid."""

    nodes: np.ndarray
    h: float
    log_rho: np.ndarray
    log_rho_faces: np.ndarray
    name: str = "density"
    log_pdf: Optional[Callable] = field(default=None, repr=False)

    @property
    def weights(self):
        lw = self.log_rho + math.log(self.h)
        return np.exp(lw - logsumexp(lw))

    @property
    def faces(self):
        return self.nodes[:-1] + 0.5 * self.h

    @classmethod
    def from_log_pdf(cls, log_pdf: Callable, lo, hi, n_nodes=4000, name="density"):
        h = (hi - lo) / n_nodes
        nodes = lo + h * (np.arange(n_nodes) + 0.5)
        faces = nodes[:-1] + 0.5 * h
        return cls(nodes, h, np.asarray(log_pdf(nodes), float), np.asarray(log_pdf(faces), float), name, log_pdf)

    def refined(self, factor=2):
        """Same window and log-density at ``factor`` times the node count."""
        if self.log_pdf is None:
            raise ResolutionError("refinement needs the log-density callable")
        lo = self.nodes[0] - 0.5 * self.h
        hi = self.nodes[-1] + 0.5 * self.h
        return Density1D.from_log_pdf(self.log_pdf, lo, hi, factor * self.nodes.size, self.name)

    @classmethod
    def from_base(cls, base, n_nodes=4000, window=None):
        f = base.factor
        lo, hi = window if window is not None else f.spectral_window
        return cls.from_log_pdf(f.log_pdf, lo, hi, n_nodes, base.key)

    def moment(self, g):
        return float(np.sum(self.weights * g(self.nodes)))

    def mass_defect(self, total_log_mass=0.0):
        """1 - (grid mass) for a density normalized on its full support."""
        return float(1.0 - math.exp(logsumexp(self.log_rho + math.log(self.h)) - total_log_mass))


@dataclass(eq=False)
class SpectralDecomposition:
    density: Density1D
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (K+1, N), orthonormal in the weighted inner product
    diag: np.ndarray = field(repr=False)
    offdiag: np.ndarray = field(repr=False)

    @property
    def K(self):
        return self.eigenvalues.size - 1

    @property
    def weights(self):
        return self.density.weights

    @property
    def lambda_1(self):
        return float(self.eigenvalues[1])

    def inner(self, u, v):
        return float(np.sum(self.weights * u * v))

    def coefficients(self, u):
        return self.eigenfunctions @ (self.weights * np.asarray(u, dtype=float))

    def apply_minus_L(self, u):
        """-L u from the same Dirichlet form that defines the eigenproblem."""
        w = self.weights
        sw = np.sqrt(w)
        v = sw * u
        Sv = self.diag * v
        Sv[:-1] += self.offdiag * v[1:]
        Sv[1:] += self.offdiag * v[:-1]
        return Sv / sw

    def dirichlet(self, u):
        return self.inner(u, self.apply_minus_L(u))

    def invariant_report(self):
        lam = self.eigenvalues
        phi = self.eigenfunctions
        w = self.weights
        gram = (phi * w) @ phi.T
        half = max(1, self.K // 2)
        # phi_0 deviation in L2(mu): nodal values in the far tail carry eps / sqrt(w_j)
        dev0 = math.sqrt(self.inner(phi[0] - 1.0, phi[0] - 1.0))
        res = []
        for k in range(1, half + 1):
            r = self.apply_minus_L(phi[k]) - lam[k] * phi[k]
            res.append(math.sqrt(self.inner(r, r)) / lam[k])
        return {
            "lambda0": float(lam[0]),
            "phi0_deviation": dev0,
            "gram_err": float(np.max(np.abs(gram - np.eye(len(lam))))),
            "max_rel_residual": float(max(res)),
            "pass": bool(abs(lam[0]) <= 1e-8 and dev0 <= 1e-8 and np.max(np.abs(gram - np.eye(len(lam)))) <= 1e-8
                         and max(res) <= 1e-6),
        }


def _sign_fix(vecs):
    # first component that is clearly nonzero becomes positive
    for v in vecs:
        big = np.abs(v) > 1e-8 * np.max(np.abs(v))
        j = int(np.argmax(big))
        if v[j] < 0:
            v *= -1.0
    return vecs


def discretize_generator(density: Density1D, K: Optional[int] = None) -> SpectralDecomposition:
    """Eigenpairs 0 = lam_0 < lam_1 <= ... <= lam_K of -L."""
    N = density.nodes.size
    if K is None:
        K = N // 4 - 1
    if K < 1 or K >= N // 4:
        raise ResolutionError(f"K = {K} needs K < N/4 = {N / 4:g}")
    w = density.weights
    if not np.all(w[1:-1] > 0):
        raise PreconditionViolation("density vanishes on the grid interior")
    sw = np.sqrt(w)
    d, e = _sym_operator(density)
    lam, vecs = eigh_tridiagonal(d, e, select="i", select_range=(0, K), lapack_driver="stemr")
    phi = (vecs / sw[:, None]).T
    lam = lam.copy()
    lam[0] = max(lam[0], 0.0) if abs(lam[0]) < 1e-8 else lam[0]
    return SpectralDecomposition(density, lam, _sign_fix(phi), d, e)


TIE_RTOL = 1e-6


def _below(eigenvalues, lam):
    # strict, with discrete eigenvalues within TIE_RTOL of lam counted as equal to it
    return eigenvalues < lam * (1.0 - TIE_RTOL)


def project_below(dec: SpectralDecomposition, u, lam: float):
    """E_lam u: modes with 0 < lam_k < lam (strict); the constant mode is dropped."""
    u = np.asarray(u, dtype=float)
    if lam <= 0:
        return np.zeros_like(u)
    sel = _below(dec.eigenvalues, lam)
    sel[0] = False
    coef = dec.coefficients(u)
    return coef[sel] @ dec.eigenfunctions[sel]


@dataclass(frozen=True)
class SpectralProfile:
    lambdas: np.ndarray
    F_values: np.ndarray
    overlay_c: float

    def is_monotone(self):
        return bool(np.all(np.diff(self.F_values) >= -1e-12))


def profile(dec: SpectralDecomposition, lambdas) -> SpectralProfile:
    """F(lam) = int |E_lam x|^2 dmu / int |x - mean|^2 dmu for the coordinate function.

    The grid measure is isotropic only up to O(h^2), so F is normalized by
    the grid variance and tends to 1 exactly.  Levels above the retained
    modes trigger a full decomposition (F is 1 above the Gershgorin bound).
    """
    lambdas = np.asarray(lambdas, dtype=float)
    x = dec.density.nodes
    xb = x - dec.inner(x, np.ones_like(x))
    var = dec.inner(xb, xb)
    lam = dec.eigenvalues
    c2 = dec.coefficients(xb) ** 2
    top = float(np.max(dec.diag + np.abs(np.concatenate([dec.offdiag, [0.0]]))
                       + np.abs(np.concatenate([[0.0], dec.offdiag]))))
    if np.any((lambdas > lam[-1]) & (lambdas <= top)):
        lam, vecs = eigh_tridiagonal(dec.diag, dec.offdiag, lapack_driver="stemr")
        c2 = (vecs.T @ (np.sqrt(dec.weights) * xb)) ** 2
    c2[0] = 0.0
    cum = np.concatenate([[0.0], np.cumsum(c2)]) / var
    F = cum[np.searchsorted(lam, lambdas * (1.0 - TIE_RTOL), side="left")]
    F = np.where(lambdas > top, 1.0, np.minimum(F, 1.0))
    # smallest c with F <= c lam |log lam| on (0, 1): diagnostic overlay only
    small = (lambdas > 0) & (lambdas < 1)
    shape = lambdas[small] * np.abs(np.log(lambdas[small]))
    overlay = float(np.max(F[small] / shape)) if np.any(small) else math.nan
    return SpectralProfile(lambdas, F, overlay)


def h_minus1_sq(dec: SpectralDecomposition, v, modes=None):
    """||v||^2_{H^-1} = sum_k <v, phi_k>^2 / lam_k for mean-zero v.

    By default the sum runs over every mode of the discrete operator,
    evaluated as <v, (-L)^+ v> with one tridiagonal solve; ``modes`` limits
    it to the retained eigenpairs instead.
    """
    v = np.asarray(v, dtype=float)
    if modes is not None:
        c = dec.coefficients(v)[1 : modes + 1]
        return float(np.sum(c**2 / dec.eigenvalues[1 : modes + 1]))
    return _h_minus1_on(dec.density, v)


def _solve_rank1(ab, u, rhs):
    """Solution z of T z = rhs orthogonal to the null vector u of tridiagonal T.

    Grounding one node makes T invertible; since rhs is orthogonal to u the
    grounded solution vanishes at that node and solves the original system.
    """
    ab = ab.copy()
    j = int(np.argmax(u))
    ab[1, j] += 1.0
    z = solve_banded((1, 1), ab, rhs)
    return z - u * (np.dot(u, z) / np.dot(u, u))


def _sym_operator(density):
    w = density.weights
    shift = logsumexp(density.log_rho + math.log(density.h))
    c = np.exp(density.log_rho_faces - shift) / density.h
    kdiag = np.zeros(w.size)
    kdiag[:-1] += c
    kdiag[1:] += c
    sw = np.sqrt(w)
    return kdiag / w, -c / (sw[:-1] * sw[1:])


def _h_minus1_on(density, v):
    d, e = _sym_operator(density)
    ab = np.zeros((3, d.size))
    ab[0, 1:] = e
    ab[1] = d
    ab[2, :-1] = e
    w = density.weights
    v = v - np.sum(w * v)
    rhs = np.sqrt(w) * v
    return float(np.dot(rhs, _solve_rank1(ab, np.sqrt(w), rhs)))


def thin_shell_bound_check(dec: SpectralDecomposition, base=None, slack=1e-6, extrapolate=True):
    """sigma^2 = Var(x^2) against 4 int_{lam_1}^inf lam^-2 F(lam) dlam.

    F is a step function with jumps c_k^2 at lam_k, so the integral is
    sum_k c_k^2 / lam_k = <x, (-L)^+ x> over all modes.  The discrete value
    carries an O(h^2) bias; with ``extrapolate`` it is Richardson-corrected
    from a half-spacing grid (the exponential case is an equality).
    """
    if base is not None:
        sigma_sq = float(base.factor.var_sq)
    else:
        m2 = dec.density.moment(lambda x: x * x)
        sigma_sq = dec.density.moment(lambda x: x**4) - m2 * m2
    den = dec.density
    raw = 4.0 * _h_minus1_on(den, den.nodes)
    bound = raw
    if extrapolate and den.log_pdf is not None:
        fine = den.refined(2)
        bound = (4.0 * (4.0 * _h_minus1_on(fine, fine.nodes)) - raw) / 3.0
    return sigma_sq, bound, bool(sigma_sq <= bound + slack)


def _as_factor(f):
    if hasattr(f, "d1") and hasattr(f, "value"):
        return f
    p = np.polynomial.Polynomial(f)

    class _P:
        value = staticmethod(p)
        d1 = staticmethod(p.deriv(1))

    return _P


def h_minus1_inequality_check(dec: SpectralDecomposition, terms: Sequence[Sequence], slack=1e-6, modes=200,
                              hyp_tol=None):
    """Var(u) <= sum_i ||d_i u||^2_{H^-1} for u = sum_terms prod_i f_i(x_i).

    Each factor is an object with ``value`` and ``d1`` (or polynomial
    coefficients).  The product measure has the eigenbasis
    phi_{k_1} x ... x phi_{k_n} with eigenvalue lam_{k_1} + ... + lam_{k_n}.
    """
    terms = [[_as_factor(f) for f in term] for term in terms]
    n = len(terms[0])
    if any(len(t) != n for t in terms):
        raise ValueError("all terms need the same number of factors")
    x = dec.density.nodes
    m = min(modes, dec.K + 1) if n > 1 else dec.K + 1
    if n >= 3:
        m = min(m, 40)
    lam = dec.eigenvalues[:m]
    phi = dec.eigenfunctions[:m]
    w = dec.weights
    if hyp_tol is None:
        # grid moments carry an O(h^2) bias, so smaller means are not resolvable
        hyp_tol = max(1e-8, 10.0 * dec.density.h**2)
    vals = [[f.value(x) * np.ones_like(x) for f in t] for t in terms]
    ders = [[f.d1(x) * np.ones_like(x) for f in t] for t in terms]
    # Var(u) by product quadrature
    mean = sum(np.prod([np.sum(w * v) for v in vs]) for vs in vals)
    second = sum(np.prod([np.sum(w * va * vb) for va, vb in zip(A, B)]) for A in vals for B in vals)
    var = float(second - mean * mean)
    lam_grid = np.zeros((m,) * n)
    for i in range(n):
        shape = [1] * n
        shape[i] = m
        lam_grid = lam_grid + lam.reshape(shape)
    rhs = 0.0
    defect = 0.0
    for i in range(n):
        grad_mean = sum(np.prod([np.sum(w * (d[j] if j == i else v[j])) for j in range(n)])
                        for v, d in zip(vals, ders))
        scale = math.sqrt(sum(np.prod([np.sum(w * (d[j] if j == i else v[j]) ** 2) for j in range(n)])
                              for v, d in zip(vals, ders)))
        if abs(grad_mean) > hyp_tol * max(1.0, scale):
            raise HypothesisViolation(f"mean of d_{i} u is {grad_mean:.3g}, needs 0")
        coef = np.zeros((m,) * n)
        norm_sq = 0.0
        for v, d in zip(vals, ders):
            fs = [d[j] if j == i else v[j] for j in range(n)]
            cs = [phi @ (w * f) for f in fs]
            tensor = cs[0]
            for cj in cs[1:]:
                tensor = np.multiply.outer(tensor, cj)
            coef = coef + tensor
        for v, d in zip(vals, ders):
            for v2, d2 in zip(vals, ders):
                fa = [d[j] if j == i else v[j] for j in range(n)]
                fb = [d2[j] if j == i else v2[j] for j in range(n)]
                norm_sq += np.prod([np.sum(w * a * b) for a, b in zip(fa, fb)])
        flat_c = coef.ravel()[1:]
        rhs += float(np.sum(flat_c**2 / lam_grid.ravel()[1:]))
        defect = max(defect, float(norm_sq - np.sum(coef**2)))
    return {"lhs": var, "rhs": rhs, "truncation_defect": defect, "modes": m, "pass": bool(var <= rhs + slack)}


def half_line_isoperimetry(density: Density1D):
    """psi = max over face thresholds of min(F, 1 - F) / rho."""
    w = density.weights
    lower = np.cumsum(w)[:-1]
    upper = np.cumsum(w[::-1])[::-1][1:]  # summed separately: 1 - lower cancels in the tail
    shift = logsumexp(density.log_rho + math.log(density.h))
    rho_f = np.exp(density.log_rho_faces - shift)
    ok = rho_f > 0
    ratio = np.minimum(lower, upper)[ok] / rho_f[ok]
    j = int(np.argmax(ratio))
    return float(ratio[j]), float(density.faces[ok][j])


def certify_uniform_1d(density: Density1D, t, slack=1e-6):
    """-(log rho)'' >= t at interior nodes (Hessian lower bound t)."""
    d2 = -_fd2(density.log_rho, density.h)[1:-1]
    return bool(np.min(d2) >= t - slack), float(np.min(d2))


def poincare_and_isoperimetry(dec: SpectralDecomposition, density: Optional[Density1D] = None, t=None, rtol=1e-4):
    """C_p = 1/lam_1, psi by half-line scan and the pass flags.

    The t-dependent flags need ``t`` and a density whose potential has
    curvature at least t on the grid; otherwise they are None.  ``rtol``
    covers discretization in equality cases.
    """
    density = density or dec.density
    lam1 = dec.lambda_1
    Cp = 1.0 / lam1
    psi, at = half_line_isoperimetry(density)
    out = {"lambda_mu": lam1, "C_p": Cp, "psi": psi, "psi_threshold": at,
           "buser_ledoux_pass": bool(psi * psi <= 9.0 / lam1), "lichnerowicz_pass": None,
           "spectral_variance_pass": None}
    if t is not None:
        ok, curv = certify_uniform_1d(density, t)
        if not ok:
            raise PreconditionViolation(f"curvature {curv:.6g} below t = {t}")
        m1 = density.moment(lambda x: x)
        var = density.moment(lambda x: (x - m1) ** 2)
        out["lichnerowicz_slack"] = 1.0 / t - Cp
        out["spectral_variance_slack"] = math.sqrt(var / t) - Cp
        out["lichnerowicz_pass"] = bool(Cp <= (1.0 / t) * (1 + rtol))
        out["spectral_variance_pass"] = bool(Cp <= math.sqrt(var / t) * (1 + rtol))
    return out


def rayleigh_check(dec: SpectralDecomposition, n_funcs=200, seed=0, tol=1e-3, floor=1e-8):
    """Random mean-zero functions never beat lam_1; LOBPCG minimization reaches it.

    LOBPCG minimizes the Rayleigh quotient of the same discrete form with
    the constants deflated, starting from the random block.
    """
    gen = np.random.default_rng(seed)
    N = dec.density.nodes.size
    w = dec.weights
    R = gen.standard_normal((N, n_funcs))
    # add smooth members so the block is not all high-frequency noise
    x = (dec.density.nodes - dec.density.nodes.mean()) / np.ptp(dec.density.nodes)
    for j in range(n_funcs // 2):
        R[:, j] = np.cos(math.pi * (j + 1) * (x + 0.5)) + 0.1 * R[:, j]
    R -= (w @ R)[None, :]
    quots = np.array([dec.dirichlet(r) / dec.inner(r, r) for r in R.T])
    # LOBPCG on the symmetric form S = W^{-1/2} K W^{-1/2}
    S = diags([dec.offdiag, dec.diag, dec.offdiag], [-1, 0, 1], format="csr")
    sw = np.sqrt(w)
    Y = sw[:, None]
    X0 = (R[:, :4] * sw[:, None])
    ab = np.zeros((3, N))
    ab[0, 1:] = dec.offdiag
    ab[1] = dec.diag + 1.0
    ab[2, :-1] = dec.offdiag
    M = LinearOperator((N, N), matvec=lambda v: solve_banded((1, 1), ab, v), dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        vals, _ = lobpcg(S, X0, Y=Y, M=M, largest=False, tol=1e-9, maxiter=500)
    rq_min = float(np.min(vals))
    lam1 = dec.lambda_1
    return {"lambda_1": lam1, "min_random_quotient": float(quots.min()), "lobpcg_min": rq_min,
            "upper_bound_ok": bool(quots.min() >= lam1 - floor), "min_matches": bool(abs(rq_min - lam1) <= tol),
            "pass": bool(quots.min() >= lam1 - floor and abs(rq_min - lam1) <= tol)}


def catalog_decomposition(base, n_nodes=4000, K=None):
    return discretize_generator(Density1D.from_base(base, n_nodes), K)


def gaussian_density(var, n_nodes=4000, half_width=8.0):
    """Tabulated N(0, var) on +-half_width standard deviations."""
    sd = math.sqrt(var)
    return Density1D.from_log_pdf(lambda x: -x * x / (2 * var) - 0.5 * math.log(2 * math.pi * var),
                                  -half_width * sd, half_width * sd, n_nodes, f"gaussian(var={var:g})")
