import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.polynomial import hermite_e

import oracles as o
from sllab import spectral as sp
from sllab.errors import HypothesisViolation, PreconditionViolation, ResolutionError
from sllab.measures import make_measure


@pytest.fixture(scope="module")
def decs():
    return {k: sp.catalog_decomposition(make_measure(k, 1), 4000) for k in ("gaussian", "exponential", "cube")}


def test_ou_spectrum_and_hermite_modes(decs):
    d = decs["gaussian"]
    assert np.allclose(d.eigenvalues[:5], [0, 1, 2, 3, 4], atol=1e-3)
    x = d.density.nodes
    for k in (1, 2, 3):
        he = hermite_e.hermeval(x, [0] * k + [1]) / math.sqrt(math.factorial(k))
        c = d.inner(he, d.eigenfunctions[k])
        assert abs(abs(c) - 1.0) < 1e-4


def test_catalog_gaps(decs):
    assert decs["exponential"].lambda_1 == pytest.approx(0.25, abs=1e-3)
    assert decs["cube"].lambda_1 == pytest.approx(o.FROZEN["cube_gap"], abs=1e-4)


def test_invariants(decs):
    for d in decs.values():
        rep = d.invariant_report()
        assert rep["pass"], rep


def test_resolution_error():
    den = sp.gaussian_density(1.0, 200)
    with pytest.raises(ResolutionError):
        sp.discretize_generator(den, K=60)
    bare = sp.Density1D(den.nodes, den.h, den.log_rho, den.log_rho_faces)
    with pytest.raises(ResolutionError):
        bare.refined()


def test_sign_convention_deterministic():
    a = sp.discretize_generator(sp.gaussian_density(1.0, 800), K=5)
    b = sp.discretize_generator(sp.gaussian_density(1.0, 800), K=5)
    assert np.array_equal(a.eigenfunctions, b.eigenfunctions)


def test_thin_shell(decs):
    expect = {"gaussian": (2.0, 4.0), "exponential": (8.0, 8.0), "cube": (0.8, 4.8)}
    for key, d in decs.items():
        sig, bound, ok = sp.thin_shell_bound_check(d, make_measure(key, 1))
        assert ok and sig == pytest.approx(expect[key][0], rel=1e-12)
        assert bound == pytest.approx(expect[key][1], rel=1e-6)


def test_h_minus1_sum_matches_modes(decs):
    d = decs["gaussian"]
    v = d.density.nodes ** 3
    v = v - d.inner(v, np.ones_like(v))
    # x^3 = He_3 + 3 He_1, so ||.||^2 = 6/3 + 9/1
    assert sp.h_minus1_sq(d, v) == pytest.approx(11.0, rel=1e-4)
    assert sp.h_minus1_sq(d, v, modes=20) == pytest.approx(11.0, rel=1e-4)


def test_ct_gaussian_and_exponential(decs):
    r = sp.h_minus1_inequality_check(decs["gaussian"], [[[0, 1], [0, 1]]])
    assert r["pass"] and r["lhs"] == pytest.approx(1.0, rel=1e-6)
    r = sp.h_minus1_inequality_check(decs["gaussian"], [[[0, 0, 1]]])
    assert r["pass"]
    r = sp.h_minus1_inequality_check(decs["exponential"], [[[-1, 0, 1], [-1, 0, 1]]])
    assert r["pass"] and r["lhs"] < r["rhs"]


def test_ct_exponential_equality_case(decs):
    # u = x^2: Var = 8 = 4 ||x||^2_{H^-1}; only the O(h^2) grid bias separates the sides
    r = sp.h_minus1_inequality_check(decs["exponential"], [[[0, 0, 1]]])
    assert r["lhs"] == pytest.approx(8.0, rel=5e-4) and r["rhs"] == pytest.approx(r["lhs"], rel=5e-4)


def test_ct_hypothesis_violation(decs):
    # u = x1: its derivative 1 has mean 1, outside the inequality's scope
    with pytest.raises(HypothesisViolation):
        sp.h_minus1_inequality_check(decs["gaussian"], [[[0, 1]]])


def test_profile(decs):
    lams = np.concatenate([np.geomspace(1e-3, 1e3, 61), [1e6]])
    g = sp.profile(decs["gaussian"], lams)
    assert g.is_monotone()
    # all Gaussian mass of x sits at eigenvalue 1 (strictly below rule)
    assert g.F_values[lams < 1.0 - 1e-3].max() == 0.0
    assert g.F_values[lams > 1.0 + 1e-3].min() == pytest.approx(1.0, abs=1e-9)
    assert sp.profile(decs["gaussian"], [1.0]).F_values[0] == 0.0
    for key in ("exponential", "cube"):
        p = sp.profile(decs[key], lams)
        assert p.is_monotone() and p.F_values[0] == 0.0
        assert p.F_values[-1] == pytest.approx(1.0, abs=1e-9)


def test_project_below(decs):
    d = decs["gaussian"]
    x = d.density.nodes
    assert np.allclose(sp.project_below(d, x, 0.5), 0.0)
    p = sp.project_below(d, x, 1.5)
    assert d.inner(p - x, p - x) < 1e-8
    assert np.all(sp.project_below(d, x, 0.0) == 0)


def test_isoperimetry(decs):
    r = sp.poincare_and_isoperimetry(decs["gaussian"])
    assert r["psi"] == pytest.approx(o.FROZEN["gaussian_psi"], abs=1e-3)
    assert r["buser_ledoux_pass"]
    c = sp.poincare_and_isoperimetry(decs["cube"])
    assert c["psi"] == pytest.approx(math.sqrt(3), abs=1e-3) and c["buser_ledoux_pass"]
    assert sp.poincare_and_isoperimetry(decs["exponential"])["buser_ledoux_pass"]


@given(var=st.floats(0.2, 1.0))
def test_lichnerowicz_for_scaled_gaussians(var):
    # N(0, var) has potential curvature 1/var >= 1 and C_p = var
    d = sp.discretize_generator(sp.gaussian_density(var, 1500), K=4)
    r = sp.poincare_and_isoperimetry(d, t=1.0)
    assert r["lichnerowicz_pass"] and r["spectral_variance_pass"]
    assert r["C_p"] == pytest.approx(var, rel=1e-4)


def test_lichnerowicz_precondition(decs):
    with pytest.raises(PreconditionViolation):
        sp.poincare_and_isoperimetry(decs["gaussian"], t=2.0)


def test_rayleigh(decs):
    for d in decs.values():
        r = sp.rayleigh_check(d, n_funcs=50)
        assert r["pass"], r


def test_density_helpers():
    den = sp.gaussian_density(1.0, 2000)
    assert den.weights.sum() == pytest.approx(1.0, rel=1e-14)
    assert abs(den.mass_defect()) < 1e-12
    assert den.moment(lambda x: x * x) == pytest.approx(1.0, rel=1e-5)
    assert den.refined(2).nodes.size == 4000
