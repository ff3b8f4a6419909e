"""Independent high-precision oracles (mpmath) and the values frozen from them.

``FROZEN`` holds numbers computed once by the functions below at 40 digits;
test_oracles.py recomputes them so a drift in either side is caught.
"""
import mpmath as mp

mp.mp.dps = 40

# one-dimensional log-densities on their supports
LOG_PDF = {
    "gaussian": (lambda x: -x * x / 2 - mp.log(2 * mp.pi) / 2, -mp.inf, mp.inf),
    "exponential": (lambda x: -(x + 1), -1, mp.inf),
    "cube": (lambda x: -mp.log(2 * mp.sqrt(3)), -mp.sqrt(3), mp.sqrt(3)),
}


def tilt_moments(key, t, theta):
    """Mean, variance and third central moment of exp(theta x - t x^2/2) rho."""
    lp, lo, hi = LOG_PDF[key]
    t, theta = mp.mpf(t), mp.mpf(theta)

    def w(x):
        return mp.exp(lp(x) + theta * x - t * x * x / 2)

    pts = [lo, hi] if lo == -mp.inf or hi == mp.inf else mp.linspace(lo, hi, 9)
    if key == "exponential":
        pts = [-1, 0, 5, 20, mp.inf]
    if key == "gaussian":
        pts = [-mp.inf, 0, mp.inf]
    Z = mp.quad(w, pts)
    m = mp.quad(lambda x: x * w(x), pts) / Z
    v = mp.quad(lambda x: (x - m) ** 2 * w(x), pts) / Z
    k3 = mp.quad(lambda x: (x - m) ** 3 * w(x), pts) / Z
    return float(m), float(v), float(k3)


def heat_density(key, s, y):
    """Density of mu * N(0, s) at y for the one-dimensional factor."""
    lp, lo, hi = LOG_PDF[key]
    s, y = mp.mpf(s), mp.mpf(y)
    f = lambda x: mp.exp(lp(x) - (y - x) ** 2 / (2 * s)) / mp.sqrt(2 * mp.pi * s)
    pts = [lo, y, hi] if lo < y < hi else [lo, hi]
    return float(mp.quad(f, pts))


def var_norm_sq_1d(key):
    """Var(x^2) for one coordinate."""
    lp, lo, hi = LOG_PDF[key]
    pts = [lo, 0, hi]
    m2 = mp.quad(lambda x: x * x * mp.exp(lp(x)), pts)
    m4 = mp.quad(lambda x: x**4 * mp.exp(lp(x)), pts)
    return float(m4 - m2 * m2)


def variance_identity_1d(key, s):
    """Var_{mu_s}(|y|^2) for one coordinate: Var(x^2) + 4 s + 2 s^2 for isotropic mu."""
    v = mp.mpf(var_norm_sq_1d(key))
    s = mp.mpf(s)
    return float(v + 4 * s + 2 * s * s)


def exponential_gap():
    """First nonzero Neumann eigenvalue of -(u'' - u') on [0, inf): 1/4 (continuous spectrum edge)."""
    return 0.25


def cube_gap():
    """Neumann gap of u'' on an interval of length 2 sqrt 3."""
    return float(mp.pi**2 / 12)


def schedule_l2(log_log_n, C2):
    """Second log-time of the schedule at 40 digits."""
    lam = mp.mpf(log_log_n)
    l1 = -mp.log(C2) - 2 * mp.exp(lam)
    return float(-16 * mp.log(-l1))


def gaussian_psi():
    """Half-line isoperimetric ratio of N(0,1): E|x| reciprocal form sqrt(pi/2)."""
    return float(mp.sqrt(mp.pi / 2))


def dyadic_lhs_linear(N, h0, h1, T_h=None):
    """int_0^{2^N} min(s^-1/2, 1) sqrt(-h') ds for linear h from h0 at 0 to h1 at 2^N."""
    T = mp.mpf(2) ** N
    slope = (mp.mpf(h0) - h1) / T
    g = lambda s: min(1 / mp.sqrt(s), 1) if s > 0 else 1
    pts = [0, 1, T] if T > 1 else [0, T]
    return float(mp.sqrt(slope) * mp.quad(g, pts))


FROZEN = {
    "exp_tilt_t0.5_th0.3": (-0.00525099909482687, 0.6125748248360906, 0.5257516819051848),
    "cube_tilt_t1_th0.7": (0.44628637309780955, 0.5884613400319461, -0.19397949749867047),
    "heat_exp_s1_y0.5": 0.25437482384451404,
    "heat_cube_s0.5_y1.5": 0.18146285784928248,
    "varsq_exponential": 8.0,
    "varsq_cube": 0.8,
    "schedule_l2_500_1": -8011.090354888959,
    "gaussian_psi": 1.2533141373155003,
    "cube_gap": 0.8224670334241132,
}
