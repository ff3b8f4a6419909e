"""Assistant functions, the localization-time schedule and F-functionals.

The assistant function ``f`` is exponential, ``exp(D0 (r - r0))``, left of
``x0 = r0 - 1/D0`` and quadratic, ``b r^2``, right of ``r0``.  In between its
second derivative ``h`` is piecewise linear (ramp down, plateau at
``-s e^{-1} D0^2``, ramp up to ``2b``), so each piece is a cubic stored by
its Taylor data at the left knot.  The constants ``s`` and ``b`` are fixed
by two linear conditions: matching ``f'`` and matching ``f`` at ``r0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConstructionFailed, InvalidH, InvalidScale, ScheduleIntegrity

E_INV = math.exp(-1.0)
B_WINDOW = (1.0 / 100.0, 1.0 / 4.0)
B_FINAL = (1.0 / 20.0, 1.0 / 5.0)
R0_RANGE = (7.0 / 3.0, 8.0 / 3.0)


@dataclass(frozen=True)
class Segment:
    """Cubic piece ``f = f0 + f1 u + h0 u^2/2 + h1 u^3/6``.

    ``u = r - a`` for left-anchored pieces and ``u = r - b`` for
    right-anchored ones; ``length`` is the exact width, since ``b - a``
    loses digits when the ramp is tiny.
    """

    a: float
    b: float
    f0: float
    f1: float
    h0: float
    h1: float
    length: float
    right_anchor: bool = False

    def _at(self, u):
        f = self.f0 + self.f1 * u + self.h0 * u * u / 2 + self.h1 * u**3 / 6
        d1 = self.f1 + self.h0 * u + self.h1 * u * u / 2
        d2 = self.h0 + self.h1 * u
        return f, d1, d2

    def at_start(self):
        return self._at(-self.length) if self.right_anchor else (self.f0, self.f1, self.h0)

    def at_end(self):
        return (self.f0, self.f1, self.h0) if self.right_anchor else self._at(self.length)

    def local(self, r):
        return r - (self.b if self.right_anchor else self.a)


@dataclass(frozen=True)
class AssistFn:
    D0: float
    r0: float
    c: float
    s: float
    b: float
    r1: float
    pieces: tuple = field(repr=False)

    @property
    def x0(self):
        return self.r0 - 1.0 / self.D0

    @property
    def knots(self):
        return [self.x0] + [p.b for p in self.pieces]

    def value(self, r):
        return evaluate(self, r, "value")

    def d1(self, r):
        return evaluate(self, r, "d1")

    def d2(self, r):
        return evaluate(self, r, "d2")

    def log_value(self, r):
        return evaluate(self, r, "log_value")

    def h(self, r):
        return self.d2(r)


def _middle(c, s, b, D0, x0, r0, final=False):
    """The three cubic pieces on [x0, r0] for given constants.

    While solving for ``b`` the last ramp is integrated forward; in the
    final assembly it is anchored at ``r0`` on the quadratic's Taylor data,
    which makes the junction at ``r0`` exact.
    """
    e = E_INV
    p1 = Segment(x0, x0 + c, e, e * D0, e * D0**2, -(1.0 + s) * e * D0**2 / c, c)
    f, d1, _ = p1.at_end()
    p2 = Segment(x0 + c, r0 - c, f, d1, -s * e * D0**2, 0.0, 1.0 / D0 - 2.0 * c)
    h1 = e * (s * D0**2 + 2.0 * math.e * b) / c
    if final:
        p3 = Segment(r0 - c, r0, b * r0 * r0, 2.0 * b * r0, 2.0 * b, h1, c, right_anchor=True)
    else:
        f, d1, _ = p2.at_end()
        p3 = Segment(r0 - c, r0, f, d1, -s * e * D0**2, h1, c)
    return (p1, p2, p3)


def _s_of_b(c, b, D0, r0):
    # slope matching: integral of h over [x0, r0] equals 2 r0 b - e^{-1} D0
    e = E_INV
    return (e * D0 - 2.0 * r0 * b + e * D0 * D0 * c / 2.0 + c * b) / (e * D0 * (1.0 - c * D0))


def integral_h(c, s, b, D0):
    """Closed-form integral of h over [r0 - 1/D0, r0]."""
    e = E_INV
    return e * D0 * D0 * c / 2.0 + c * b + s * e * D0 * (D0 * c - 1.0)


def build_assist_fn(D0: float, r0: float, validate: bool = True) -> AssistFn:
    if not D0 > 4.0:
        raise ConstructionFailed(f"D0 must exceed 4, got {D0}")
    if not (R0_RANGE[0] - 1e-12 <= r0 <= R0_RANGE[1] + 1e-12):
        raise ConstructionFailed(f"r0 must lie in [7/3, 8/3], got {r0}")
    D0 = float(D0)
    r0 = float(r0)
    x0 = r0 - 1.0 / D0

    c = min(1e-2 / D0**2, 1.0 / (4.0 * D0))
    for _ in range(61):
        lo, hi = (_s_of_b(c, bb, D0, r0) for bb in B_WINDOW)
        if 0.0 < min(lo, hi) and max(lo, hi) < 1.0:
            break
        c *= 0.5
    else:
        raise ConstructionFailed(f"no ramp width puts s in (0,1) for D0={D0}, r0={r0}")
    if c < 1e3 * np.spacing(r0):
        raise ConstructionFailed(f"ramp width {c:.3g} is below float resolution near r0; cap D0")

    # f(r0) is affine in b: evaluate at b = 0 and b = 1 and solve b r0^2 = f(r0)
    def f_end(bb):
        return _middle(c, _s_of_b(c, bb, D0, r0), bb, D0, x0, r0)[2].at_end()[0]

    F0 = f_end(0.0)
    F1 = f_end(1.0) - F0
    b = F0 / (r0 * r0 - F1)
    if not (B_WINDOW[0] <= b <= B_WINDOW[1]):
        raise ConstructionFailed(f"b={b} left the window [1/100, 1/4] (D0={D0}, r0={r0}, c={c})")
    if not (B_FINAL[0] <= b <= B_FINAL[1]):
        raise ConstructionFailed(f"b={b} outside [1/20, 1/5] (D0={D0}, r0={r0}, c={c})")
    s = _s_of_b(c, b, D0, r0)
    if not (0.0 < s < 1.0):
        raise ConstructionFailed(f"s={s} outside (0, 1)")
    pieces = _middle(c, s, b, D0, x0, r0, final=True)
    fn = AssistFn(D0=D0, r0=r0, c=c, s=s, b=b, r1=x0 + c / (1.0 + s), pieces=pieces)
    if validate:
        problems = invariant_report(fn)["failures"]
        if problems:
            raise ConstructionFailed("; ".join(problems))
    return fn


def evaluate(fn: AssistFn, r, mode="value"):
    """Piecewise closed-form evaluation: value, log_value, d1 or d2."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    D0, r0, b = fn.D0, fn.r0, fn.b
    left = r < fn.x0
    right = r >= r0
    z = r - r0
    if mode == "value":
        out[left] = np.exp(D0 * z[left])
        out[right] = b * r[right] ** 2
    elif mode == "log_value":
        out[left] = D0 * z[left]
        out[right] = math.log(b) + 2.0 * np.log(r[right])
    elif mode == "d1":
        out[left] = D0 * np.exp(D0 * z[left])
        out[right] = 2.0 * b * r[right]
    elif mode == "d2":
        out[left] = D0 * D0 * np.exp(D0 * z[left])
        out[right] = 2.0 * b
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for k, p in enumerate(fn.pieces):
        last = k == len(fn.pieces) - 1
        sel = (r >= p.a) & ((r < p.b) if not last else (r < r0))
        if not np.any(sel):
            continue
        u = p.local(r[sel])
        if mode in ("value", "log_value"):
            v = p.f0 + p.f1 * u + p.h0 * u * u / 2 + p.h1 * u**3 / 6
            out[sel] = np.log(v) if mode == "log_value" else v
        elif mode == "d1":
            out[sel] = p.f1 + p.h0 * u + p.h1 * u * u / 2
        else:
            out[sel] = p.h0 + p.h1 * u
    return out if out.ndim else float(out)


def invariant_report(fn: AssistFn, n_grid=10_000, tol=1e-8):
    """Evaluate every structural invariant of an assistant function."""
    fails = []
    D0, r0, b, x0 = fn.D0, fn.r0, fn.b, fn.x0

    def rel(a, e):
        return abs(a - e) / max(abs(e), 1e-300)

    if not (B_FINAL[0] <= b <= B_FINAL[1]):
        fails.append(f"b={b} outside [1/20,1/5]")
    if not (0 < fn.s < 1):
        fails.append(f"s={fn.s} outside (0,1)")
    if not (0 < fn.c < 1 / (2 * D0)):
        fails.append(f"c={fn.c} outside (0, 1/(2 D0))")
    if not (x0 <= fn.r1 < x0 + fn.c):
        fails.append("r1 outside first ramp")
    elif abs(float(fn.d2(fn.r1))) > 1e-9 * D0 * D0 + 4 * np.spacing(fn.r1) * abs(fn.pieces[0].h1):
        # second term: r1 itself is only representable to one ulp
        fails.append("h(r1) != 0")

    # C2 continuity at each knot, from closed forms on both sides
    left_data = [(math.exp(-1.0), D0 * E_INV, D0 * D0 * E_INV)]
    for p in fn.pieces:
        left_data.append(p.at_end())
    right_data = [p.at_start() for p in fn.pieces] + [(b * r0 * r0, 2 * b * r0, 2 * b)]
    cont = 0.0
    for (fa, da, ha), (fb, db, hb) in zip(left_data, right_data):
        cont = max(cont, rel(fa, fb), rel(da, db), abs(ha - hb) / max(abs(ha), abs(hb)))
    if cont > tol:
        fails.append(f"C2 continuity defect {cont:.3g}")

    # Taylor data at x0 and branch formulas
    if rel(float(fn.d1(x0)), E_INV * D0) > tol or rel(float(fn.d2(x0)), E_INV * D0 * D0) > tol:
        fails.append("f'(x0) or f''(x0) wrong")
    grid = np.linspace(r0 - 2.0, r0 + 5.0, n_grid)
    f = fn.value(grid)
    d1 = fn.d1(grid)
    d2 = fn.d2(grid)
    lm = grid < x0
    if np.any(np.abs(f[lm] - np.exp(D0 * (grid[lm] - r0))) > 1e-15 * np.maximum(f[lm], 1e-300)):
        fails.append("exponential branch mismatch")
    rm = grid >= r0
    if np.any(f[rm] != b * grid[rm] ** 2):
        fails.append("quadratic branch mismatch")
    if np.any(np.abs(d2) > D0 * D0 * f * (1 + 1e-12)):
        fails.append("|f''| > D0^2 f")
    if np.any(d1 < 0):
        fails.append("f decreasing")
    mid = np.linspace(x0, r0, 2001)
    fm = fn.value(mid)
    if np.any(fm < E_INV * (1 - 1e-12)) or np.any(fm > 1 + 1e-12):
        fails.append("f leaves [1/e, 1] on [x0, r0]")
    return {"failures": fails, "continuity_defect": cont}


# ---------------------------------------------------------------------------
# schedule


def _next_log_t(log_abs):
    return -16.0 * log_abs


@dataclass(frozen=True)
class Schedule:
    log_t: tuple  # l_1 .. l_{k0+1}
    s_seq: tuple  # s_1 .. s_{k0+1}
    k0: int
    log_log_n: float
    C2: float
    threshold_log: float = -1000.0
    overflow: bool = False
    log_abs_log_t: tuple = ()  # log|l_k|, exact even when l_1 overflows

    @property
    def log_D0(self):
        """log of D0_k = |l_k|^4 for each stored k."""
        la = self.log_abs_log_t or tuple(math.log(-x) for x in self.log_t)
        return tuple(4.0 * v for v in la)

    def validate(self):
        """Raise ScheduleIntegrity unless the recursion, (t_k <= t_{k+1}^2) and the s-bounds hold."""
        lt = self.log_t
        la = self.log_abs_log_t or tuple(math.log(-x) for x in lt)
        for k in range(len(lt) - 1):
            want = _next_log_t(la[k])
            if abs(lt[k + 1] - want) > 1e-9 * abs(want):
                raise ScheduleIntegrity(f"recursion broken at k={k + 1}")
        for k in range(self.k0):
            # l_k <= 2 l_{k+1}, compared through magnitudes when l_k overflowed
            if not (la[k] >= math.log(2.0) + la[k + 1] - 1e-15):
                raise ScheduleIntegrity(f"t_k <= t_(k+1)^2 fails at k={k + 1}")
        for s in self.s_seq:
            if not (R0_RANGE[0] - 1e-15 <= s <= R0_RANGE[1] + 1e-15):
                raise ScheduleIntegrity(f"s_k={s} outside [7/3, 8/3]")
        return True

    def to_dict(self):
        return {
            "C2": self.C2,
            "Lambda": self.log_log_n,
            "threshold_log": self.threshold_log,
            "k0": self.k0,
            "log_t": list(self.log_t),
            "log_abs_log_t": list(self.log_abs_log_t),
            "s_seq": list(self.s_seq),
            "overflow_flag": self.overflow,
        }

    @classmethod
    def toy(cls, log_t: Sequence[float], s_seq: Optional[Sequence[float]] = None, k0=None):
        """A hand-made schedule (not validated), e.g. for small-D0 experiments."""
        log_t = tuple(float(x) for x in log_t)
        if s_seq is None:
            s = [7.0 / 3.0]
            for lt in log_t[1:]:
                s.append(s[-1] + abs(lt) ** -0.5)
            s_seq = s
        k0 = len(log_t) if k0 is None else k0
        return cls(log_t=log_t, s_seq=tuple(s_seq), k0=k0, log_log_n=float("nan"), C2=float("nan"),
                   log_abs_log_t=tuple(math.log(abs(x)) for x in log_t))


def fixed_point_log_t():
    """Negative fixed point of l -> -16 log(-l) (about -67.4)."""
    from scipy.optimize import brentq

    return brentq(lambda l: l + 16.0 * math.log(-l), -1000.0, -20.0)


def build_schedule(log_log_n: float, C2: float, threshold_log: float = -1000.0, max_terms=64) -> Schedule:
    """Log-space schedule from Lambda = log log n.

    ``l_1 = -log C2 - 2 e^Lambda`` is stored with ``exp`` clipped at 700 and a
    flag; the recursion itself runs on ``log|l_1|``, computed without overflow.
    """
    if not log_log_n > 0:
        raise InvalidScale(f"Lambda must be positive, got {log_log_n}")
    if not C2 > 0:
        raise InvalidScale(f"C2 must be positive, got {C2}")
    if threshold_log >= fixed_point_log_t():
        raise InvalidScale(
            f"threshold {threshold_log} is above the recursion's fixed point; k0 would be unbounded"
        )
    lam = float(log_log_n)
    lc = math.log(C2)
    inner = 2.0 + lc * math.exp(-lam)  # |l_1| = e^Lambda * inner
    if inner <= 0:
        raise InvalidScale("t_1 >= 1 for this (Lambda, C2)")
    overflow = lam > 700.0
    l1 = -lc - 2.0 * math.exp(min(lam, 700.0))
    log_abs = [lam + math.log(inner)]
    log_t = [l1]
    while len(log_t) < max_terms:
        nxt = _next_log_t(log_abs[-1])
        log_t.append(nxt)
        log_abs.append(math.log(-nxt))
        if nxt > threshold_log:
            break
    k0 = sum(1 for x in log_t if x <= threshold_log)
    # keep l_1 .. l_{k0+1}
    log_t = log_t[: k0 + 1]
    log_abs = log_abs[: k0 + 1]
    s = [7.0 / 3.0]
    for la in log_abs[1:]:
        s.append(s[-1] + math.exp(-0.5 * la))
    sch = Schedule(
        log_t=tuple(log_t), s_seq=tuple(s), k0=k0, log_log_n=lam, C2=float(C2),
        threshold_log=float(threshold_log), overflow=overflow, log_abs_log_t=tuple(log_abs),
    )
    sch.validate()
    return sch


@dataclass(frozen=True)
class FamilyMember:
    k: int
    fn: AssistFn
    log_D0: float
    capped: bool


def f_family(schedule: Schedule, cap_D0: float = 200.0):
    """f_k with r0 = s_k and D0 = min(|l_k|^4, cap_D0), k = 1..k0."""
    if cap_D0 < 5:
        raise ValueError("cap_D0 must be >= 5")
    out = []
    for k in range(schedule.k0):
        lD = schedule.log_D0[k]
        capped = lD > math.log(cap_D0)
        D0 = cap_D0 if capped else abs(schedule.log_t[k]) ** 4
        out.append(FamilyMember(k + 1, build_assist_fn(D0, schedule.s_seq[k]), lD, capped))
    return out


# ---------------------------------------------------------------------------
# F-functionals


def F_eval(fn, eigenvalues, axis=-1):
    """Sum of f over eigenvalues (clamped at 0); empty input gives 0."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        return 0.0
    if np.any(lam < -1e-10):
        raise ValueError("eigenvalues below -1e-10")
    return np.sum(fn.value(np.maximum(lam, 0.0)), axis=axis)


def F_log_eval(fn, eigenvalues, axis=-1):
    """log of F_eval via log-sum-exp of log f; stable for huge D0."""
    from scipy.special import logsumexp

    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        return -math.inf
    return logsumexp(fn.log_value(np.maximum(lam, 0.0)), axis=axis)


def growth_bound_check(paths, fn: AssistFn, t0: float, exponent: float = 1000.0, t_end=None,
                       n_se=3.0):
    """E F_t against (t/t0)^exponent E F_t0 on [t0, max(t0, D0^-4)] or [t0, t_end].

    Errors come from the per-path variable F_t - R F_t0. The
    default exponent 1000 is the reference value and smaller ones are exploratory.
    """
    from .localization import _as_ensemble, path_mean_se

    if not (0 < t0 <= 1):
        raise ValueError("t0 must lie in (0, 1]")
    ens = _as_ensemble(paths)
    hi = max(t0, fn.D0**-4) if t_end is None else t_end
    k0 = ens.time_index(t0)
    F = F_eval(fn, ens.eigenvalues)
    m0, _ = path_mean_se(F[:, k0], ens.batch)
    rows = []
    for k, t in enumerate(ens.times):
        if t < t0 - 1e-12 or t > hi + 1e-12:
            continue
        log_R = exponent * math.log(t / t0)
        m, _ = path_mean_se(F[:, k], ens.batch)
        if log_R > 300.0:
            # R^2 F^2 would overflow the variance; compare in logs
            rows.append(dict(t=float(t), EF=float(m), ratio=math.exp(math.log(m) - math.log(m0) - log_R)
                             if m > 0 else 0.0, se=math.nan, passed=bool(math.isfinite(m))))
            continue
        R = math.exp(log_R)
        _, se = path_mean_se(F[:, k] - R * F[:, k0], ens.batch)
        rows.append(dict(t=float(t), EF=float(m), ratio=float(m / (R * m0)), se=float(se),
                         passed=bool(m <= R * m0 + n_se * se + 1e-12 * abs(R * m0))))
    return {"exponent": exponent, "interval": (t0, hi), "rows": rows,
            "passed": bool(rows) and all(r["passed"] for r in rows)}


# ---------------------------------------------------------------------------
# dyadic integral bound


def _G(s):
    """Antiderivative of min(s^{-1/2}, 1) vanishing at 0."""
    s = np.asarray(s, dtype=float)
    return np.where(s <= 1.0, s, 2.0 * np.sqrt(np.maximum(s, 1.0)) - 1.0)


def _dyadic_lhs_piecewise(s, h):
    slope = -np.diff(h) / np.diff(s)
    return float(np.sum(np.sqrt(np.maximum(slope, 0.0)) * np.diff(_G(s))))


def dyadic_bound_check(h_samples, N: int, rtol=1e-4, max_refine=12):
    """int_0^{2^N} min(s^{-1/2},1) sqrt(-h') ds <= sqrt(h(0)) sqrt(N+1).

    ``h_samples`` is either a pair ``(s, h)`` of tabulated values (treated as
    the piecewise-linear interpolant, integrated exactly) or a callable,
    tabulated on geometrically graded grids refined until the integral
    changes by less than ``rtol``.
    """
    if int(N) != N or N < 0:
        raise ValueError("N must be a nonnegative integer")
    T = 2.0**N
    if callable(h_samples):
        prev = None
        lhs = None
        for level in range(max_refine):
            m = 64 * 2**level
            s = np.unique(np.concatenate([np.linspace(0.0, min(1.0, T), m + 1), np.geomspace(1.0, T, m + 1)
                                          if T > 1 else []]))
            h = np.asarray(h_samples(s), dtype=float)
            _validate_h(h)
            lhs = _dyadic_lhs_piecewise(s, h)
            if prev is not None and abs(lhs - prev) <= rtol * max(abs(lhs), 1e-300):
                break
            prev = lhs
        h0 = float(h_samples(np.array([0.0]))[0])
    else:
        s, h = (np.asarray(a, dtype=float) for a in h_samples)
        if s.ndim != 1 or s.shape != h.shape or s.size < 2 or np.any(np.diff(s) <= 0):
            raise InvalidH("tabulation must be strictly increasing in s")
        if s[0] != 0.0 or s[-1] < T:
            raise InvalidH("tabulation must cover [0, 2^N]")
        _validate_h(h)
        if s[-1] > T:
            hT = np.interp(T, s, h)
            keep = s < T
            s, h = np.append(s[keep], T), np.append(h[keep], hT)
        lhs = _dyadic_lhs_piecewise(s, h)
        h0 = float(h[0])
    rhs = math.sqrt(h0) * math.sqrt(N + 1)
    return lhs, rhs, bool(lhs <= rhs * (1 + 1e-12))


def _validate_h(h):
    if np.any(h < 0):
        raise InvalidH("h must be nonnegative")
    if np.any(np.diff(h) > 0):
        raise InvalidH("h must be non-increasing")
