"""Experiment runner: configuration, check suites, artifacts and manifests."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import __version__
from . import assist, heatflow as hf, localization as loc, spectral as sp
from .errors import ConfigError, SllabError
from .measures import catalog, make_measure
from .rng import MASK64, generator

EXPERIMENTS = ("simulate", "schedule", "assistfn", "heatflow", "spectral", "verify-all")
DEFAULT_DIAGNOSTIC = ("opnorm-tail", "gk2-shape")


# ---------------------------------------------------------------------------
# configuration


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)


def _names(text):
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "verify-all"
    measure: str = "gaussian"
    dim: int = 4
    paths: int = 10_000
    pool_size: int = 0
    dt: float = 1e-3
    t_grid: tuple = tuple(round(0.05 * k, 2) for k in range(21))
    s_grid: tuple = (0.1, 0.5, 1.0, 2.0)
    C2: float = 1.0
    log_log_n: float = 500.0
    cap_D0: float = 200.0
    threshold_log: float = -1000.0
    toy_exponent: float = 1000.0
    assist_D0: float = 10.0
    assist_r0: float = 2.5
    spectral_nodes: int = 4000
    csv_paths: int = 1000
    base_seed: int = 0
    out_dir: str = "sllab-out"
    diagnostic: tuple = DEFAULT_DIAGNOSTIC

    # key -> (parser, validator, description)
    def validate(self):
        for f in dataclasses.fields(self):
            ok, why = _RANGES[f.name](getattr(self, f.name))
            if not ok:
                raise ConfigError(f"{f.name}: {why} (got {getattr(self, f.name)!r})", key=f.name)
        return self

    def snapshot(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _rng(lo, hi, open_lo=False):
    def check(v):
        if isinstance(v, float) and not math.isfinite(v):
            return False, "must be finite"
        if (v <= lo if open_lo else v < lo) or v > hi:
            return False, f"must lie in {'(' if open_lo else '['}{lo}, {hi}]"
        return True, ""

    return check


def _grid_ok(v):
    if not v or v[0] != 0.0 or any(b <= a for a, b in zip(v, v[1:])):
        return False, "must start at 0 and increase strictly"
    return True, ""


_RANGES = {
    "experiment": lambda v: (v in EXPERIMENTS, f"one of {', '.join(EXPERIMENTS)}"),
    "measure": lambda v: (v in catalog(), f"one of {', '.join(sorted(catalog()))}"),
    "dim": _rng(1, 64),
    "paths": _rng(1, 10_000_000),
    "pool_size": _rng(0, 10_000_000),
    "dt": _rng(0.0, 1.0, open_lo=True),
    "t_grid": _grid_ok,
    "s_grid": lambda v: (bool(v) and all(s > 0 for s in v), "positive values"),
    "C2": _rng(0.0, 1e6, open_lo=True),
    "log_log_n": _rng(0.0, 1e6, open_lo=True),
    "cap_D0": _rng(5.0, 1e7),
    "threshold_log": _rng(-1e300, -67.5),
    "toy_exponent": _rng(0.0, 1e6, open_lo=True),
    "assist_D0": _rng(1.0, 1e7, open_lo=True),
    "assist_r0": _rng(7.0 / 3.0, 8.0 / 3.0),
    "spectral_nodes": _rng(400, 400_000),
    "csv_paths": _rng(0, 10_000_000),
    "base_seed": _rng(0, MASK64),
    "out_dir": lambda v: (bool(v), "must be nonempty"),
    "diagnostic": lambda v: (True, ""),
}

_PARSERS = {
    "experiment": str,
    "measure": str,
    "out_dir": str,
    "t_grid": _floats,
    "s_grid": _floats,
    "diagnostic": _names,
}


def field_names():
    return [f.name for f in dataclasses.fields(RunConfig)]


def parse_value(key, text):
    if key not in _RANGES:
        raise ConfigError(f"unknown key {key!r}", key=key)
    ftype = {f.name: f.type for f in dataclasses.fields(RunConfig)}[key]
    try:
        if key in _PARSERS:
            return _PARSERS[key](text)
        if ftype == "int":
            return int(str(text), 0)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})", key=key) from None


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value", line=lineno)
        key, val = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key, line=lineno)
        try:
            values[key] = parse_value(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}", key=key, line=lineno) from None
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig):
    lines = []
    for k, v in cfg.snapshot().items():
        if isinstance(v, list):
            v = ",".join(_fmt(x) for x in v)
        elif isinstance(v, float):
            v = _fmt(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


# ---------------------------------------------------------------------------
# check records


@dataclass
class Check:
    name: str
    anchor: str
    measure: str
    lhs: float
    rhs: float
    tolerance: float
    margin: float
    passed: bool
    required: bool = True
    detail: dict = field(default_factory=dict)

    def row(self):
        return {
            "anchor": self.anchor,
            "name": self.name,
            "measure": self.measure,
            "lhs": float(self.lhs),
            "rhs": float(self.rhs),
            "tolerance": float(self.tolerance),
            "margin": float(self.margin),
            "pass": bool(self.passed),
            "required": bool(self.required),
        }


CHECK_COLUMNS = ["anchor", "name", "measure", "lhs", "rhs", "tolerance", "margin", "pass", "required"]


def _eq(name, anchor, measure, lhs, rhs, tol, **detail):
    margin = tol - abs(lhs - rhs)
    return Check(name, anchor, measure, lhs, rhs, tol, margin, bool(margin >= 0), detail=detail)


def _le(name, anchor, measure, lhs, rhs, slack=0.0, **detail):
    """lhs <= rhs + slack."""
    margin = rhs + slack - lhs
    return Check(name, anchor, measure, lhs, rhs, slack, margin, bool(margin >= 0), detail=detail)


def _flag(name, anchor, measure, ok, lhs=math.nan, rhs=math.nan, tol=0.0, margin=None, **detail):
    if margin is None:
        margin = 0.0 if ok else -1.0
    return Check(name, anchor, measure, lhs, rhs, tol, margin, bool(ok), detail=detail)


def _failed(name, anchor, measure, exc):
    return Check(name, anchor, measure, math.nan, math.nan, 0.0, -math.inf, False,
                 detail={"error": f"{type(exc).__name__}: {exc}"})


# ---------------------------------------------------------------------------
# suites; each returns a list of Check and a dict of artifacts (name -> text)


def _engine(cfg, model):
    if cfg.pool_size:
        from .measures import draw_pool

        return loc.PoolEngine(draw_pool(model, cfg.pool_size, cfg.base_seed))
    return loc.ProductEngine(model)


def _delta(times):
    d = np.diff(times)
    return float(d.min()) if np.allclose(d, d[0]) else None


def localization_suite(cfg: RunConfig, key: str, dim: int, third_dim=4, keep=None):
    model = make_measure(key, dim)
    times = np.asarray(cfg.t_grid)
    ens = loc.simulate_exact(model, _engine(cfg, model), times, cfg.paths, cfg.base_seed)
    if keep is not None:
        keep["ensemble"] = ens
    checks = []
    obs = loc.path_observables(ens)
    n = dim
    if key == "gaussian":
        for k, t in enumerate(times):
            if t == 0:
                continue
            m_a, se_a = loc.path_mean_se(obs["a_norm_sq"][:, k], ens.batch)
            target = t * n / (1 + t)
            checks.append(_eq(f"E|a_t|^2 t={t:g}", "exact-gaussian", key, m_a, target, 3 * se_a + 1e-12))
            mA, seA = loc.path_mean_se(ens.covs[:, k], ens.batch)
            err = float(np.max(np.abs(mA - np.eye(n) / (1 + t)) - 3 * seA))
            checks.append(_flag(f"A_t entries t={t:g}", "exact-gaussian", key, err <= 1e-10,
                                lhs=float(mA[0, 0]), rhs=1 / (1 + t), tol=1e-10, margin=1e-10 - err))
    mc = loc.martingale_checks(ens, delta=_delta(times))
    worst = min(3 * r["se"] + 1e-10 * n - abs(r["value"] - n) for r in mc["conservation"])
    checks.append(_flag("E[Tr A_t + |a_t|^2] = n", "martingale", key, all(r["passed"] for r in mc["conservation"]),
                        lhs=mc["conservation"][-1]["value"], rhs=n, margin=worst))
    if mc["drift"]:
        checks.append(_flag("dE A_t = -E A_t^2", "martingale", key, all(r["passed"] for r in mc["drift"])))
    delta = _delta(times)
    if delta is not None:
        di = loc.derivative_identity_check(ens, delta)
        if di["rows"]:
            worst = min(r["tol"] - abs(r["lhs"] - r["rhs"]) for r in di["rows"])
            checks.append(_flag("d/dt E|a_t|^2 = E Tr A_t^2", "derivative", key, di["passed"],
                                lhs=di["rows"][-1]["lhs"], rhs=di["rows"][-1]["rhs"], margin=worst))
    lc = loc.lichnerowicz_check(ens)
    checks.append(_flag("||A_t||_op <= 1/t", "Lic", key, lc["passed"],
                        margin=min((r["cap"] - r["max_lambda"] for r in lc["rows"]), default=0.0)))
    # third-moment checks on a small dimension
    d3 = min(dim, third_dim)
    m3 = make_measure(key, d3)
    tsel = [t for t in (0.2, 0.5) if np.any(np.isclose(times, t))]
    n3 = min(cfg.paths, 1000)
    if tsel:
        grid3 = np.array([0.0] + tsel)
        e3 = loc.simulate_exact(m3, _engine(cfg, m3), grid3, n3, cfg.base_seed, third=True, with_se=True)
        for r in (0.5, 1.0, 2.0):
            mb = loc.moment_bound_check(e3, r)
            checks.append(_flag(f"restricted third moments r={r:g}", "moment-bound", key, mb["passed"],
                                lhs=max(x["max_ratio"] for x in mb["rows"]), rhs=1.0,
                                margin=1.0 - max(x["max_ratio"] for x in mb["rows"])))
        l3 = loc.lichnerowicz_check(e3)
        checks.append(_flag("||A_t||_op <= 1/t (third-moment run)", "Lic", key, l3["passed"]))
    if delta is not None and d3 <= 4:
        e4 = loc.simulate_exact(m3, _engine(cfg, m3), times, n3, cfg.base_seed, third=True)
        ed = loc.eigen_drift_check(e4, loc.quadratic_fn(), delta=delta)
        checks.append(_flag("eigenvalue drift of sum lambda^2", "eigen-drift", key, ed["passed"]))
    tail = loc.opnorm_tail(ens, cfg.C2)
    checks.append(Check("P(||A_t|| >= 2)", "opnorm-tail", key, max(r["frequency"] for r in tail["rows"]),
                        max(r["bound"] for r in tail["rows"]), 0.0, 0.0, True, required=False))
    return checks


def driver_suite(cfg: RunConfig, n_paths=None):
    model = make_measure("exponential", 2)
    eng = loc.ProductEngine(model)
    n_paths = n_paths or cfg.paths
    ex = loc.simulate_exact(model, eng, [0.0, 1.0], n_paths, cfg.base_seed)
    em = loc.simulate_em(model, eng, cfg.dt, 1.0, n_paths, cfg.base_seed + 1, record_times=[0.0, 1.0])
    checks = []
    for i in range(2):
        ks = loc.ks_driver_check(ex.thetas[:, -1, i], em.thetas[:, -1, i])
        checks.append(_flag(f"KS theta_1[{i}] exact vs Euler", "driver-ks", "exponential", ks["passed"],
                            lhs=ks["pvalue"], rhs=0.01, margin=ks["pvalue"] - 0.01))
    return checks


def schedule_suite(cfg: RunConfig):
    checks = []
    for lam in (10.0, 50.0, 100.0, 500.0, 690.0):
        for c2 in (0.1, 1.0, 10.0):
            name = f"Lambda={lam:g} C2={c2:g}"
            try:
                sch = assist.build_schedule(lam, c2, cfg.threshold_log)
            except SllabError as exc:
                checks.append(_failed(name, "tk", "-", exc))
                continue
            la = sch.log_abs_log_t
            gaps = [la[k] - la[k + 1] - math.log(2.0) for k in range(sch.k0)]
            checks.append(_flag(f"{name}: l_k <= 2 l_(k+1)", "tk", "-", min(gaps, default=0.0) >= -1e-15,
                                lhs=sch.k0, margin=min(gaps, default=0.0)))
            sl = min(min(x - 7 / 3, 8 / 3 - x) for x in sch.s_seq)
            checks.append(_flag(f"{name}: s_k in [7/3, 8/3]", "inc", "-", sl >= -1e-15, lhs=max(sch.s_seq),
                                rhs=8 / 3, margin=sl))
    sch = assist.build_schedule(500.0, 1.0, -1000.0)
    checks.append(_eq("k0 at Lambda=500", "schedule", "-", sch.k0, 2, 0))
    checks.append(_eq("l_2 at Lambda=500", "schedule", "-", sch.log_t[1], -8011.1, 0.1))
    user = assist.build_schedule(cfg.log_log_n, cfg.C2, cfg.threshold_log)
    return checks, user


def assist_suite(cfg: RunConfig, n=200):
    gen = generator(cfg.base_seed, 7)
    fails = 0
    worst = 0.0
    for _ in range(n):
        # above ~1e5 the ramp width drops below the float spacing near r0
        D0 = float(np.exp(gen.uniform(np.log(5.0), np.log(1e5))))
        r0 = float(gen.uniform(7 / 3, 8 / 3))
        rep = assist.invariant_report(assist.build_assist_fn(D0, r0))
        fails += bool(rep["failures"])
        worst = max(worst, rep["continuity_defect"])
    checks = [_flag(f"{n} random (D0, r0): all invariants", "assist", "-", fails == 0, lhs=fails, rhs=0),
              _le("worst C2 continuity defect", "assist", "-", worst, 1e-8)]
    fn = assist.build_assist_fn(cfg.assist_D0, cfg.assist_r0)
    rep = assist.invariant_report(fn)
    checks.append(_flag(f"configured f (D0={cfg.assist_D0:g}, r0={cfg.assist_r0:g})", "assist", "-",
                        not rep["failures"], detail=rep))
    return checks, fn


def dyadic_suite(cfg: RunConfig, n=1000):
    gen = generator(cfg.base_seed, 11)
    viol = 0
    worst = math.inf
    for _ in range(n):
        N = int(gen.integers(0, 9))
        m = int(gen.integers(2, 200))
        s = np.concatenate([[0.0], np.sort(gen.uniform(0, 2.0**N, m - 2)), [2.0**N]])
        s = np.unique(s)
        h = np.sort(gen.exponential(size=s.size) * gen.uniform(0.1, 10))[::-1]
        if gen.random() < 0.3:
            h[gen.integers(1, h.size):] = h[-1]
        lhs, rhs, ok = assist.dyadic_bound_check((s, h), N)
        viol += not ok
        worst = min(worst, rhs - lhs)
    return [_flag(f"{n} random non-increasing h", "dyadic", "-", viol == 0, lhs=viol, rhs=0, margin=worst)]


def growth_suite(cfg: RunConfig, key="exponential"):
    sch = assist.Schedule.toy([-2.0])
    fn = assist.f_family(sch, cap_D0=cfg.cap_D0)[0].fn
    model = make_measure(key, 2)
    times = np.linspace(0.05, 1.0, 20)
    ens = loc.simulate_exact(model, loc.ProductEngine(model), np.concatenate([[0.0], times]),
                             min(cfg.paths, 2000), cfg.base_seed)
    g = assist.growth_bound_check(ens, fn, 0.05, exponent=cfg.toy_exponent, t_end=1.0)
    return [_flag(f"E F_t <= (t/t0)^{cfg.toy_exponent:g} E F_t0", "growth", key, g["passed"])]


def heatflow_suite(cfg: RunConfig, light=False):
    checks = []
    bases = [make_measure(k, 1) for k in ("gaussian", "exponential", "cube")]
    for b in bases:
        for s in cfg.s_grid:
            r = hf.variance_identity_check(make_measure(b.key, 3), s)
            checks.append(_eq(f"variance identity s={s:g}", "cn", b.key, r["lhs"], r["rhs"], 1e-4 * abs(r["rhs"]), s=s))
    r = hf.variance_identity_grid2d(make_measure("cube", 2), 0.5)
    checks.append(_eq("variance identity 2D grid s=0.5", "cn", "cube", r["lhs"], r["rhs"], 1e-4 * abs(r["rhs"]), s=0.5))
    gen = generator(cfg.base_seed, 13)
    for b in bases:
        for s in (0.1, 1.0):
            sm = hf.smooth(b, s)
            inv = hf.invariant_report(sm)
            checks.append(_flag(f"mu_s mass and covariance s={s:g}", "cn", b.key, inv["pass"],
                                lhs=inv["cov_rel_err"], rhs=0.0, tol=1e-4, s=s))
            w = hf.hessian_window_check(sm, s)
            checks.append(_flag(f"Hessian window s={s:g}", "Id", b.key, w["pass"], lhs=w["min_d2"], rhs=w["lower"],
                                tol=1e-6, margin=min(w["min_d2"] - w["lower"], -w["max_d2"]) + 1e-6, s=s))
            u = hf.random_test_function(gen, bump="compact")
            v = hf.TestFunction(gen.normal(size=3))
            a = hf.adjointness_check(sm, s, u, v.value)
            checks.append(_eq(f"adjointness s={s:g}", "adjoint", b.key, a["lhs"], a["rhs"], 1e-6, s=s))
            for j in range(3 if light else 8):
                u = hf.random_test_function(gen)
                kp = hf.gradient_contraction_check(sm, u, s)
                checks.append(_le(f"gradient contraction s={s:g} #{j}", "KP", b.key, kp["lhs"], kp["rhs"], 1e-8, s=s))
    checks.append(_flag("int phi'' dmu >= 1", "theta", "gaussian", hf.theta_check(make_measure("gaussian", 3))["pass"]))
    n_mc = cfg.paths
    for b, u, t, label in ((bases[0], lambda x: x, 1.0, "x"), (bases[1], lambda x: x * x, 0.5, "x^2"),
                           (bases[2], hf.TestFunction([0, 0, 0, 1], 1.5, "compact").value, 1.0, "x^3 bump")):
        r = hf.check_st_correspondence(b, u, t, n_paths=n_mc, seed=cfg.base_seed)
        checks.append(_eq(f"E|int u dp_t|^2, u={label}, t={t:g}", "Qq", b.key, r["lhs"], r["rhs"], 3 * r["se"] + 1e-12, s=1 / t))
        checks.append(_le(f"Q_s u = tilt mean, u={label}", "Qq", b.key, r["pointwise_max_err"], 1e-8, s=1 / t))
    bump = hf.TestFunction([0, 0, 0, 1], 2.5, "compact")
    for b in bases if not light else bases[:1]:
        r = hf.bochner_gamma2_check(b, bump, s=1.0)
        for k in ("boc", "gat", "di"):
            x = r[k]
            checks.append(_flag(f"{k} with x^3 bump, s=1", k, b.key, x["pass"], lhs=x["lhs"], rhs=x["rhs"],
                                tol=x["tol"], margin=x["tol"] - x["rel_err"], refine_ratio=x["refine_ratio"], s=1.0))
    pg = generator(cfg.base_seed, 17)
    worst = math.inf
    ok = True
    for _ in range(20):
        t = float(pg.uniform(0.2, 1.0))
        r = hf.projection_ulc_check(hf.random_uniform_density(pg, t), t)
        ok &= r["pass"]
        worst = min(worst, r["margin"])
    checks.append(_flag("20 certified 2D inputs", "projection", "-", ok, margin=worst + 1e-6))
    neg = hf.projection_ulc_check(hf.gaussian_density2d(np.eye(2)), 0.6, certify=False)
    checks.append(_flag("negative control t'=0.6 on N(0, I) fails", "projection", "gaussian", not neg["pass"],
                        lhs=neg["min_curvature"], rhs=neg["required"]))
    return checks


def spectral_suite(cfg: RunConfig):
    checks = []
    profiles = {}
    lam_grid = np.concatenate([np.geomspace(1e-3, 1e3, 121), [1e6]])
    summaries = {}
    for key in ("gaussian", "exponential", "cube"):
        base = make_measure(key, 1)
        dec = sp.catalog_decomposition(base, cfg.spectral_nodes)
        inv = dec.invariant_report()
        checks.append(_flag("decomposition invariants", "spectrum", key, inv["pass"], detail=inv))
        finer = sp.catalog_decomposition(base, 2 * cfg.spectral_nodes, K=10)
        checks.append(_le("lambda_1 change on halving h", "spectrum", key,
                          abs(finer.lambda_1 - dec.lambda_1), 1e-4))
        if key == "gaussian":
            for k in (1, 2, 3):
                checks.append(_eq(f"OU eigenvalue {k}", "spectrum", key, dec.eigenvalues[k], k, 1e-3))
        if key == "exponential":
            checks.append(_eq("lambda_1", "spectrum", key, dec.lambda_1, 0.25, 1e-3))
        sig, bound, ok = sp.thin_shell_bound_check(dec, base)
        checks.append(_le("sigma^2 <= 4 int lam^-2 F", "thin", key, sig, bound, 1e-6))
        pi = sp.poincare_and_isoperimetry(dec)
        checks.append(_le("psi^2 <= 9 / lambda_1", "buser-ledoux", key, pi["psi"] ** 2, 9 / pi["lambda_mu"]))
        if key == "gaussian":
            checks.append(_eq("psi", "buser-ledoux", key, pi["psi"], math.sqrt(math.pi / 2), 1e-3))
        if key == "gaussian":
            terms = [[[-1.0, 0.0, 1.0]]]
        else:
            terms = [[[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]]]
        hm = sp.h_minus1_inequality_check(dec, terms)
        checks.append(_le("Var u <= sum ||d_i u||^2_H-1", "ct", key, hm["lhs"], hm["rhs"], 1e-6))
        ray = sp.rayleigh_check(dec, seed=cfg.base_seed)
        checks.append(_flag("Rayleigh quotients", "spectrum", key, ray["pass"], lhs=ray["lobpcg_min"],
                            rhs=ray["lambda_1"], tol=1e-3))
        pr = sp.profile(dec, lam_grid)
        checks.append(_flag("F monotone, F(1e6) = 1", "thin", key,
                            pr.is_monotone() and abs(pr.F_values[-1] - 1) <= 1e-6,
                            lhs=pr.F_values[-1], rhs=1.0))
        checks.append(Check("smallest c with F <= c lam|log lam|", "gk2-shape", key, pr.overlay_c, math.nan, 0.0, 0.0,
                            True, required=False))
        profiles[key] = pr
        summaries[key] = {"lambda_1": dec.lambda_1, "C_p": pi["C_p"], "psi": pi["psi"], "sigma_sq": sig,
                          "thin_bound": bound,
                          "passes": {"thin": ok, "buser_ledoux": pi["buser_ledoux_pass"], "ct": hm["pass"],
                                     "rayleigh": ray["pass"]}}
    for t in (0.5, 1.0, 3.0):
        dec = sp.discretize_generator(sp.gaussian_density(1.0 / (2 * t)), K=20)
        pi = sp.poincare_and_isoperimetry(dec, t=t)
        checks.append(_le(f"C_p <= 1/t, N(0, 1/(2t)) t={t:g}", "Lic", "gaussian", pi["C_p"], 1 / t))
        checks.append(_le(f"C_p <= sqrt(||Cov||/t) t={t:g}", "kla", "gaussian", pi["C_p"],
                          pi["C_p"] + pi["spectral_variance_slack"]))
    g = sp.poincare_and_isoperimetry(sp.catalog_decomposition(make_measure("gaussian", 1), cfg.spectral_nodes, K=5),
                                     t=1.0)
    checks.append(_flag("C_p <= 1/t at equality, N(0,1) t=1", "Lic", "gaussian", g["lichnerowicz_pass"],
                        lhs=g["C_p"], rhs=1.0, tol=1e-4))
    checks.append(_flag("C_p <= sqrt(||Cov||/t) at equality, N(0,1) t=1", "kla", "gaussian",
                        g["spectral_variance_pass"], lhs=g["C_p"], rhs=1.0, tol=1e-4))
    return checks, profiles, summaries


# ---------------------------------------------------------------------------
# artifacts and manifest


def checks_csv(checks: List[Check]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CHECK_COLUMNS)
    for c in checks:
        r = c.row()
        w.writerow([_fmt(r[k]) for k in CHECK_COLUMNS])
    return buf.getvalue()


def profile_csv(profiles):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["measure", "lambda", "F_lambda"])
    for key, pr in profiles.items():
        for lam, F in zip(pr.lambdas, pr.F_values):
            w.writerow([key, _fmt(lam), _fmt(F)])
    return buf.getvalue()


def assistfn_json(fn, n=201):
    r = np.linspace(fn.r0 - 2.0 / fn.D0 - 0.5, fn.r0 + 0.5, n)
    rec = {"D0": fn.D0, "r0": fn.r0, "c": fn.c, "s": fn.s, "b": fn.b, "r1": fn.r1, "knots": list(map(float, fn.knots)),
           "grid_samples": [[float(a), float(b), float(c), float(d)]
                            for a, b, c, d in zip(r, fn.value(r), fn.d1(r), fn.d2(r))]}
    return _json(rec)


def _json(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


@dataclass
class RunManifest:
    config: dict
    tool_version: str
    started: str
    finished: str
    runtime_s: float
    checks: list
    outputs: dict
    exit_code: int

    def to_json(self):
        return _json(dataclasses.asdict(self))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**d)


def _threads():
    try:
        return max(1, int(os.environ.get("SLLAB_THREADS", "1")))
    except ValueError:
        return 1


def _guard(name, anchor, measure, fn: Callable):
    """Run a suite; a module error becomes a failed check instead of a crash."""
    try:
        out = fn()
    except (SllabError, ValueError, ArithmeticError) as exc:
        return [_failed(name, anchor, measure, exc)], None
    if isinstance(out, tuple):
        return out[0], out[1:]
    return out, None


def run(cfg: RunConfig, write=True, log=None) -> RunManifest:
    """Dispatch the configured experiment, write artifacts and the manifest."""
    cfg.validate()
    t0 = time.time()
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    artifacts = {}
    tasks = []
    exp = cfg.experiment
    say = log or (lambda msg: None)

    if exp in ("simulate", "verify-all"):
        keys = [cfg.measure] if exp == "simulate" else ["gaussian", "exponential", "cube"]
        for key in keys:
            keep = {}
            tasks.append((f"localization {key}", "martingale", key,
                          (lambda key=key, keep=keep: localization_suite(cfg, key, cfg.dim, keep=keep)), keep))
        if exp == "verify-all":
            tasks.append(("driver equivalence", "driver-ks", "exponential", lambda: driver_suite(cfg), None))
            tasks.append(("growth bound", "growth", "exponential", lambda: growth_suite(cfg), None))
    if exp in ("schedule", "verify-all"):
        tasks.append(("schedule", "tk", "-", lambda: schedule_suite(cfg), "schedule"))
    if exp in ("assistfn", "verify-all"):
        tasks.append(("assist", "assist", "-", lambda: assist_suite(cfg), "assistfn"))
        tasks.append(("dyadic", "dyadic", "-", lambda: dyadic_suite(cfg), None))
    if exp in ("heatflow", "verify-all"):
        tasks.append(("heatflow", "cn", "-", lambda: heatflow_suite(cfg), None))
    if exp in ("spectral", "verify-all"):
        tasks.append(("spectral", "spectrum", "-", lambda: spectral_suite(cfg), "spectral"))

    def go(task):
        name, anchor, measure, fn, _ = task
        say(f"running {name}")
        return _guard(name, anchor, measure, fn)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(go, tasks))

    checks: List[Check] = []
    for task, (cks, extra) in zip(tasks, results):
        checks.extend(cks)
        tag = task[4]
        if extra is None:
            continue
        if tag == "schedule":
            artifacts["schedule.json"] = _json(extra[0].to_dict())
        elif tag == "assistfn":
            artifacts["assistfn.json"] = assistfn_json(extra[0])
        elif tag == "spectral":
            artifacts["profile.csv"] = profile_csv(extra[0])
            artifacts["spectral.json"] = _json(extra[1])
    for task in tasks:
        keep = task[4]
        if isinstance(keep, dict) and "ensemble" in keep and "paths.csv" not in artifacts and cfg.csv_paths:
            ens = keep["ensemble"]
            if task[2] == cfg.measure or exp == "simulate":
                buf = io.StringIO()
                loc.write_paths_csv(_head(ens, cfg.csv_paths), buf)
                artifacts["paths.csv"] = buf.getvalue()
    for c in checks:
        if c.anchor in cfg.diagnostic:
            c.required = False
    artifacts["checks.csv"] = checks_csv(checks)
    exit_code = 0 if all(c.passed for c in checks if c.required) else 1
    digests = {name: hashlib.sha256(text.encode("utf-8")).hexdigest() for name, text in sorted(artifacts.items())}
    manifest = RunManifest(
        config=cfg.snapshot(),
        tool_version=__version__,
        started=started,
        finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        runtime_s=round(time.time() - t0, 3),
        checks=[dict(c.row(), detail=_plain(c.detail)) for c in checks],
        outputs=digests,
        exit_code=exit_code,
    )
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in artifacts.items():
            with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(manifest.to_json())
    manifest.artifacts = artifacts
    return manifest


def _head(ens, count):
    if ens.n_paths <= count:
        return ens
    return dataclasses.replace(
        ens,
        thetas=ens.thetas[:count], means=ens.means[:count], covs=ens.covs[:count], ess=ens.ess[:count],
        path_ids=ens.path_ids[:count], third=None, means_se=None, covs_se=None, third_se=None, batch=None,
    )


# ---------------------------------------------------------------------------
# consolidated report


REPORT_COLUMNS = ["anchor", "measure", "name", "lhs", "rhs", "margin", "pass", "required", "source"]


def report(manifests, sources=None):
    """One row per check, ordered by (anchor, measure); returns (rows, exit_code, notes)."""
    if not manifests:
        raise ValueError("report needs at least one manifest")
    rows = []
    notes = []
    for i, m in enumerate(manifests):
        src = sources[i] if sources else str(i)
        if not m.checks:
            notes.append(f"{src}: no checks (0 rows)")
        for c in m.checks:
            rows.append({**{k: c.get(k) for k in REPORT_COLUMNS if k != "source"}, "source": src})
    rows.sort(key=lambda r: (str(r["anchor"]), str(r["measure"])))
    code = 0 if all(r["pass"] for r in rows if r.get("required", True)) else 1
    return rows, code, notes


def report_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[k]) if not isinstance(r[k], str) else r[k] for k in REPORT_COLUMNS])
    return buf.getvalue()


def report_text(rows, notes=()):
    lines = [f"{'anchor':<14} {'measure':<12} {'pass':<5} {'margin':>12}  name"]
    for r in rows:
        mark = "ok" if r["pass"] else ("FAIL" if r.get("required", True) else "diag")
        margin = r["margin"]
        ms = f"{margin:12.4g}" if isinstance(margin, (int, float)) else f"{margin!s:>12}"
        lines.append(f"{str(r['anchor']):<14} {str(r['measure']):<12} {mark:<5} {ms}  {r['name']}")
    lines.extend(notes)
    return "\n".join(lines) + "\n"
