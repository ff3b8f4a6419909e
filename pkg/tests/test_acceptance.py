"""Acceptance criteria, one test each, at the stated sizes and tolerances.

Every test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary.
"""
import math
import time

import numpy as np
import pytest

import conftest
from sllab import assist, heatflow as hf, lab, localization as loc, spectral as sp
from sllab.measures import draw_pool, make_measure
from sllab.rng import generator

GRID = np.round(np.arange(21) * 0.05, 10)


def verdict(num, title, ok, detail=""):
    line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    conftest.ACCEPTANCE[num] = line
    print(line)
    assert ok, line


def test_01_gaussian_exactness():
    t0 = time.time()
    m = make_measure("gaussian", 8)
    times = np.array([0.0, 0.1, 0.5, 1.0])
    ens = loc.simulate_exact(m, loc.ProductEngine(m), times, 10_000, 0)
    obs = loc.path_observables(ens)
    ok = True
    worst = 0.0
    for k in (1, 2, 3):
        t = times[k]
        mA, seA = loc.path_mean_se(ens.covs[:, k])
        err = np.abs(mA - np.eye(8) / (1 + t))
        ok &= bool(np.all(err <= 3 * seA + 1e-12))
        ma, sea = loc.path_mean_se(obs["a_norm_sq"][:, k])
        ok &= abs(ma - t * 8 / (1 + t)) <= 3 * sea
        worst = max(worst, abs(ma - t * 8 / (1 + t)) / sea)
    wall = time.time() - t0
    verdict(1, "Gaussian localization exactness", ok and wall < 120,
            f"max |E|a|^2 - tn/(1+t)|/SE = {worst:.2f}, {wall:.1f} s")


def test_02_derivative_identity():
    m = make_measure("exponential", 4)
    ens = loc.simulate_exact(m, loc.ProductEngine(m), GRID, 20_000, 0)
    r = loc.derivative_identity_check(ens, 0.05, t_range=(0.1, 1.0), rel_tol=0.05, n_se=3.0)
    ts = [row["t"] for row in r["rows"]]
    worst = max(abs(row["lhs"] - row["rhs"]) / row["tol"] for row in r["rows"])
    verdict(2, "derivative identity", r["passed"] and min(ts) <= 0.1 + 1e-9 and max(ts) >= 0.95 - 1e-9,
            f"{len(ts)} times, worst error/tol = {worst:.2f}")


def test_03_martingale_conservation():
    ok = True
    worst = 0.0
    for key in ("gaussian", "exponential", "cube"):
        m = make_measure(key, 4)
        ens = loc.simulate_exact(m, loc.ProductEngine(m), GRID, 10_000, 0)
        mc = loc.martingale_checks(ens, n_se=3.0)
        ok &= all(r["passed"] for r in mc["conservation"])
        worst = max(worst, max(abs(r["value"] - 4) / max(r["se"], 1e-300) for r in mc["conservation"][1:]))
    verdict(3, "martingale conservation", ok, f"worst deviation {worst:.2f} SE")


def test_04_driver_equivalence():
    m = make_measure("exponential", 2)
    eng = loc.ProductEngine(m)
    ex = loc.simulate_exact(m, eng, [0.0, 1.0], 10_000, 0)
    em = loc.simulate_em(m, eng, 1e-3, 1.0, 10_000, 1, record_times=[0.0, 1.0])
    res = [loc.ks_driver_check(ex.thetas[:, -1, i], em.thetas[:, -1, i], alpha=0.01) for i in range(2)]
    verdict(4, "driver equivalence (KS at 1%)", all(r["passed"] for r in res),
            ", ".join(f"p={r['pvalue']:.3f}" for r in res))


def test_05_assist_suite():
    t0 = time.time()
    gen = generator(0, 7)
    fails = 0
    worst = 0.0
    for _ in range(200):
        D0 = float(np.exp(gen.uniform(np.log(5.0), np.log(1e5))))
        r0 = float(gen.uniform(7 / 3, 8 / 3))
        fn = assist.build_assist_fn(D0, r0)
        rep = assist.invariant_report(fn)
        fails += bool(rep["failures"]) or not (1 / 20 <= fn.b <= 1 / 5)
        worst = max(worst, rep["continuity_defect"])
    wall = time.time() - t0
    verdict(5, "assistant function invariants", fails == 0 and worst <= 1e-8 and wall < 10,
            f"200 cases, worst C2 defect {worst:.1e}, {wall:.2f} s")


def test_06_schedule():
    ok = True
    for lam in (10.0, 50.0, 100.0, 500.0, 690.0):
        for c2 in (0.1, 1.0, 10.0):
            sch = assist.build_schedule(lam, c2)
            la = sch.log_abs_log_t
            ok &= all(la[k] >= math.log(2) + la[k + 1] - 1e-15 for k in range(sch.k0))
            ok &= all(7 / 3 <= s <= 8 / 3 for s in sch.s_seq)
    sch = assist.build_schedule(500.0, 1.0)
    ok &= sch.k0 == 2 and abs(sch.log_t[1] + 8011.1) <= 0.1
    verdict(6, "schedule doubling and increment rules", ok, f"k0 = {sch.k0}, l_2 = {sch.log_t[1]:.4f}")


def test_07_variance_identity():
    ok = True
    worst = 0.0
    for key in ("gaussian", "exponential", "cube"):
        for s in (0.1, 0.5, 1.0, 2.0):
            r = hf.variance_identity_check(make_measure(key, 4), s, tol=1e-4)
            ok &= r["pass"]
            worst = max(worst, r["rel_err"])
            if key == "gaussian":
                ok &= abs(r["lhs"] - 2 * (1 + s) ** 2 * 4) <= 1e-10 * r["lhs"]
    verdict(7, "variance identity under smoothing", ok, f"worst relative error {worst:.1e}")


def test_08_semigroup_identities():
    ok = True
    notes = []
    gen = generator(0, 13)
    bases = [make_measure(k, 1) for k in ("gaussian", "exponential", "cube")]
    for b in bases:
        r = hf.check_st_correspondence(b, lambda x: x * x, 0.5, n_paths=10_000, seed=0)
        ok &= r["pass"]
        for s in (0.5, 1.0):
            sm = hf.smooth(b, s)
            u = hf.random_test_function(gen, bump="compact")
            ok &= hf.adjointness_check(sm, s, u, hf.TestFunction(gen.normal(size=3)).value, tol=1e-6)["pass"]
            ok &= hf.hessian_window_check(sm, s, slack=1e-6)["pass"]
            ok &= hf.gradient_contraction_check(sm, hf.random_test_function(gen), s, slack=1e-8)["pass"]
        g = hf.bochner_gamma2_check(b, hf.TestFunction([0, 0, 0, 1], 2.5, "compact"), s=1.0, tol=1e-3, factor=3.0)
        for k in ("boc", "gat", "di"):
            x = g[k]
            ok &= x["pass"] and (x["at_floor"] or x["refine_ratio"] >= 3.0)
            notes.append(f"{b.key[:3]}.{k} ratio {x['refine_ratio']:.1f}")
    verdict(8, "semigroup identities", ok, "; ".join(notes))


def test_09_spectral():
    ok = True
    decs = {k: sp.catalog_decomposition(make_measure(k, 1), 4000) for k in ("gaussian", "exponential", "cube")}
    g = decs["gaussian"]
    ok &= bool(np.all(np.abs(g.eigenvalues[:4] - np.arange(4)) <= 1e-3))
    ok &= abs(decs["exponential"].lambda_1 - 0.25) <= 1e-3
    sig, bound, thin = sp.thin_shell_bound_check(g, make_measure("gaussian", 1))
    ok &= thin and sig == 2.0 and abs(bound - 4.0) <= 1e-6
    for key, dec in decs.items():
        ok &= sp.thin_shell_bound_check(dec, make_measure(key, 1))[2]
        ok &= sp.poincare_and_isoperimetry(dec)["buser_ledoux_pass"]
        terms = [[[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]]] if key != "cube" else [[[-1.0, 0.0, 1.0]]]
        ok &= sp.h_minus1_inequality_check(dec, terms)["pass"]
    psi = sp.poincare_and_isoperimetry(g)["psi"]
    ok &= abs(psi - math.sqrt(math.pi / 2)) <= 1e-3
    verdict(9, "spectral suite", ok, f"sigma^2 = {sig:g} <= {bound:.6f}, psi = {psi:.5f}")


def test_10_moment_bound_and_cap():
    m = make_measure("exponential", 2)
    times = [0.0, 0.2, 0.5]
    exact = loc.simulate_exact(m, loc.ProductEngine(m), times, 1000, 0, third=True, with_se=True)
    pool = loc.PoolEngine(draw_pool(m, 100_000, seed=1))
    mc = loc.simulate_exact(m, pool, times, 1000, 0, third=True, with_se=True)
    viol = 0
    for ens in (exact, mc):
        for r in (0.5, 1.0, 2.0, 3.0):
            viol += sum(row["violations"] for row in loc.moment_bound_check(ens, r, n_se=3.0)["rows"])
        viol += sum(row["violations"] for row in loc.lichnerowicz_check(ens, n_se=3.0)["rows"])
    verdict(10, "moment bound and Lichnerowicz cap", viol == 0,
            f"{viol} violations, exact and 1e5-point pool engines")


def test_11_dyadic():
    checks = lab.dyadic_suite(lab.RunConfig(), n=1000)
    verdict(11, "dyadic integral bound", all(c.passed for c in checks), f"min slack {checks[0].margin:.3g}")


def test_12_projection():
    gen = generator(0, 17)
    worst = math.inf
    ok = True
    for _ in range(20):
        t = float(gen.uniform(0.2, 1.0))
        r = hf.projection_ulc_check(hf.random_uniform_density(gen, t), t, slack=1e-6)
        ok &= r["pass"]
        worst = min(worst, r["margin"])
    neg = hf.projection_ulc_check(hf.gaussian_density2d(np.eye(2)), 0.6, certify=False)
    verdict(12, "projection keeps uniform convexity", ok and not neg["pass"],
            f"min margin {worst:.3g}; control curvature {neg['min_curvature']:.3f} < {neg['required']:.1f}")


def test_13_verify_all(tmp_path):
    t0 = time.time()
    m1 = lab.run(lab.RunConfig(experiment="verify-all", out_dir=str(tmp_path / "a")))
    wall = time.time() - t0
    m2 = lab.run(lab.RunConfig(experiment="verify-all", out_dir=str(tmp_path / "b")))
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in m1.outputs)
    ok = m1.exit_code == 0 and m1.outputs == m2.outputs and same and wall < 900
    verdict(13, "verify-all", ok, f"{len(m1.checks)} checks, {wall:.0f} s single core, artifacts identical: {same}")
