"""The frozen oracle values still match a fresh high-precision computation."""
import pytest

import oracles as o


@pytest.mark.parametrize("key,t,theta,frozen", [
    ("exponential", 0.5, 0.3, "exp_tilt_t0.5_th0.3"),
    ("cube", 1.0, 0.7, "cube_tilt_t1_th0.7"),
])
def test_tilt_oracles(key, t, theta, frozen):
    assert o.tilt_moments(key, t, theta) == pytest.approx(o.FROZEN[frozen], rel=1e-14)


def test_heat_oracles():
    assert o.heat_density("exponential", 1.0, 0.5) == pytest.approx(o.FROZEN["heat_exp_s1_y0.5"], rel=1e-14)
    assert o.heat_density("cube", 0.5, 1.5) == pytest.approx(o.FROZEN["heat_cube_s0.5_y1.5"], rel=1e-14)


def test_scalar_oracles():
    assert o.var_norm_sq_1d("exponential") == pytest.approx(o.FROZEN["varsq_exponential"], rel=1e-14)
    assert o.var_norm_sq_1d("cube") == pytest.approx(o.FROZEN["varsq_cube"], rel=1e-14)
    assert o.schedule_l2(500, 1) == pytest.approx(o.FROZEN["schedule_l2_500_1"], rel=1e-14)
    assert o.gaussian_psi() == pytest.approx(o.FROZEN["gaussian_psi"], rel=1e-15)
    assert o.cube_gap() == pytest.approx(o.FROZEN["cube_gap"], rel=1e-15)
