import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles as o
from sllab import assist
from sllab import localization as loc
from sllab.errors import ConstructionFailed, InvalidH, InvalidScale, ScheduleIntegrity
from sllab.measures import make_measure

D0s = st.floats(5.0, 1e5)
R0s = st.floats(7 / 3, 8 / 3)


@given(D0=D0s, r0=R0s)
def test_invariants_hold(D0, r0):
    fn = assist.build_assist_fn(D0, r0)
    rep = assist.invariant_report(fn)
    assert rep["failures"] == [] and rep["continuity_defect"] <= 1e-8
    assert 1 / 20 <= fn.b <= 1 / 5


@given(D0=st.floats(5.0, 1e4), r0=R0s, z=st.floats(-5.0, 5.0))
def test_derivatives_consistent(D0, r0, z):
    # centered differences of the closed forms agree away from knots
    fn = assist.build_assist_fn(D0, r0)
    r = r0 + z / D0
    if min(abs(r - k) for k in fn.knots) < 1e-3 / D0:
        return
    h = 1e-6 / D0
    fd = (fn.value(r + h) - fn.value(r - h)) / (2 * h)
    assert fd == pytest.approx(float(fn.d1(r)), rel=1e-5, abs=1e-9)


def test_branch_formulas_exact():
    fn = assist.build_assist_fn(10.0, 2.5)
    assert fn.log_value(2.5 - 10) == -100.0
    assert fn.value(3.0) == fn.b * 9.0
    assert fn.d1(fn.x0) == pytest.approx(math.exp(-1) * 10.0, rel=1e-12)
    assert fn.value(np.array([0.0, 3.0])).shape == (2,)
    with pytest.raises(ValueError):
        assist.evaluate(fn, 1.0, "bogus")


@pytest.mark.parametrize("D0,r0", [(4.0, 2.5), (10.0, 2.0), (10.0, 3.0), (1e9, 2.5)])
def test_construction_rejects(D0, r0):
    with pytest.raises(ConstructionFailed):
        assist.build_assist_fn(D0, r0)


def test_integral_h_matches_slope_jump():
    fn = assist.build_assist_fn(50.0, 2.4)
    assert assist.integral_h(fn.c, fn.s, fn.b, fn.D0) == pytest.approx(
        float(fn.d1(fn.r0)) - float(fn.d1(fn.x0)), rel=1e-9)


def test_schedule_regression():
    sch = assist.build_schedule(500.0, 1.0, -1000.0)
    assert sch.k0 == 2
    assert sch.log_t[1] == pytest.approx(o.FROZEN["schedule_l2_500_1"], abs=1e-6)
    assert abs(sch.log_t[1] - (-8011.1)) <= 0.1
    assert sch.validate()
    assert len(sch.log_D0) == len(sch.log_t)


@pytest.mark.parametrize("lam", [10.0, 50.0, 100.0, 500.0, 690.0, 5000.0])
@pytest.mark.parametrize("C2", [0.1, 1.0, 10.0])
def test_schedule_properties(lam, C2):
    sch = assist.build_schedule(lam, C2)
    la = sch.log_abs_log_t
    for k in range(sch.k0):
        assert la[k] >= math.log(2) + la[k + 1] - 1e-15
    assert all(7 / 3 <= s <= 8 / 3 for s in sch.s_seq)
    assert sch.overflow == (lam > 700)
    d = sch.to_dict()
    assert d["k0"] == sch.k0 and d["overflow_flag"] == sch.overflow


def test_schedule_errors():
    with pytest.raises(InvalidScale):
        assist.build_schedule(-1.0, 1.0)
    with pytest.raises(InvalidScale):
        assist.build_schedule(10.0, 0.0)
    with pytest.raises(InvalidScale):
        assist.build_schedule(10.0, 1.0, threshold_log=-10.0)
    sch = assist.build_schedule(100.0, 1.0)
    bad = assist.Schedule(log_t=(sch.log_t[0], sch.log_t[1] + 1.0) + sch.log_t[2:], s_seq=sch.s_seq, k0=sch.k0,
                          log_log_n=100.0, C2=1.0)
    with pytest.raises(ScheduleIntegrity):
        bad.validate()


def test_fixed_point():
    l = assist.fixed_point_log_t()
    assert l == pytest.approx(-16 * math.log(-l), rel=1e-12)


def test_family_caps():
    sch = assist.build_schedule(50.0, 1.0)
    fam = assist.f_family(sch, cap_D0=200.0)
    assert len(fam) == sch.k0
    assert all(m.capped and m.fn.D0 == 200.0 for m in fam)
    toy = assist.f_family(assist.Schedule.toy([-2.0]))
    assert toy[0].fn.D0 == 16.0 and not toy[0].capped


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=8))
def test_F_log_consistent(lams):
    fn = assist.build_assist_fn(20.0, 2.5)
    assert assist.F_log_eval(fn, lams) == pytest.approx(math.log(assist.F_eval(fn, lams)), rel=1e-12, abs=1e-12)


def test_F_edge_cases():
    fn = assist.build_assist_fn(20.0, 2.5)
    assert assist.F_eval(fn, []) == 0.0 and assist.F_log_eval(fn, []) == -math.inf
    with pytest.raises(ValueError):
        assist.F_eval(fn, [-1.0])


def test_growth_trivial_endpoint():
    m = make_measure("exponential", 4)
    ens = loc.simulate_exact(m, loc.ProductEngine(m), [0.0, 0.05, 0.1, 0.15], 200, 0)
    g = assist.growth_bound_check(ens, assist.build_assist_fn(5.0, 2.5), 0.1)
    assert g["interval"] == (0.1, 0.1) and len(g["rows"]) == 1
    assert g["rows"][0]["ratio"] == 1.0 and g["passed"]


def test_growth_overflow_safe():
    m = make_measure("exponential", 2)
    ens = loc.simulate_exact(m, loc.ProductEngine(m), np.linspace(0, 1, 21), 300, 0)
    g = assist.growth_bound_check(ens, assist.build_assist_fn(16.0, 7 / 3), 0.05, t_end=1.0)
    assert g["passed"]
    assert all(np.isfinite(r["ratio"]) for r in g["rows"])


@pytest.mark.parametrize("N", [0, 1, 3, 6])
def test_dyadic_linear_oracle(N):
    T = 2.0**N
    s = np.array([0.0, T])
    lhs, rhs, ok = assist.dyadic_bound_check((s, np.array([3.0, 1.0])), N)
    assert lhs == pytest.approx(o.dyadic_lhs_linear(N, 3.0, 1.0), rel=1e-12)
    assert rhs == pytest.approx(math.sqrt(3 * (N + 1))) and ok


def test_dyadic_callable_converges():
    lhs, rhs, ok = assist.dyadic_bound_check(lambda s: np.exp(-s), 4)
    assert ok and 0 < lhs < rhs


@given(N=st.integers(0, 8), data=st.data())
def test_dyadic_property(N, data):
    m = data.draw(st.integers(2, 30))
    raw = data.draw(st.lists(st.floats(0.0, 100.0), min_size=m, max_size=m))
    h = np.sort(np.array(raw))[::-1]
    s = np.linspace(0.0, 2.0**N, m)
    lhs, rhs, ok = assist.dyadic_bound_check((s, h), N)
    assert ok, (lhs, rhs)


def test_dyadic_rejects():
    with pytest.raises(InvalidH):
        assist.dyadic_bound_check((np.array([0.0, 1.0]), np.array([1.0, 2.0])), 0)
    with pytest.raises(InvalidH):
        assist.dyadic_bound_check((np.array([0.0, 0.5]), np.array([2.0, 1.0])), 0)
    with pytest.raises(ValueError):
        assist.dyadic_bound_check((np.array([0.0, 1.0]), np.array([2.0, 1.0])), -1)
