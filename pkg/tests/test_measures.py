import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles as o
from sllab import measures
from sllab.errors import InvalidDimension
from sllab.rng import generator


@pytest.mark.parametrize("key", ["gaussian", "exponential", "cube"])
def test_isotropic_samples(key):
    m = measures.make_measure(key, 3)
    x = m.draw(200_000, generator(1))
    assert np.allclose(x.mean(axis=0), 0.0, atol=0.02)
    assert np.allclose(np.cov(x.T), np.eye(3), atol=0.03)


@pytest.mark.parametrize("key", ["exponential", "cube"])
def test_var_norm_sq_oracle(key):
    m = measures.make_measure(key, 5)
    assert m.oracle.var_norm_sq == pytest.approx(5 * o.FROZEN[f"varsq_{key}"], rel=1e-12)
    assert m.factor.var_sq == pytest.approx(o.FROZEN[f"varsq_{key}"], rel=1e-12)


def test_tilt_moments_match_oracle():
    f = measures.make_measure("exponential", 1).factor
    assert np.array(f.tilt_moments(0.5, 0.3), dtype=float) == pytest.approx(o.FROZEN["exp_tilt_t0.5_th0.3"], rel=1e-9)
    f = measures.make_measure("cube", 1).factor
    assert np.array(f.tilt_moments(1.0, 0.7), dtype=float) == pytest.approx(o.FROZEN["cube_tilt_t1_th0.7"], rel=1e-9)


@given(t=st.floats(0.0, 5.0), theta=st.floats(-6.0, 6.0))
def test_gaussian_tilt_closed_form(t, theta):
    f = measures.make_measure("gaussian", 1).factor
    m, v, k3 = f.tilt_moments(t, theta)
    assert float(m) == pytest.approx(theta / (1 + t), rel=1e-10, abs=1e-12)
    assert float(v) == pytest.approx(1 / (1 + t), rel=1e-10)
    assert abs(float(k3)) < 1e-8


@given(t=st.floats(1e-6, 3.0), theta=st.floats(-4.0, 4.0))
def test_tilted_variance_below_cap(t, theta):
    # the tilt of a log-concave factor by t|x|^2/2 has variance at most 1/t
    for key in ("exponential", "cube"):
        _, v, _ = measures.make_measure(key, 1).factor.tilt_moments(t, theta)
        assert float(v) > 0
        if t > 0:
            assert float(v) <= 1 / t * (1 + 1e-9)


@given(theta=st.floats(-4.0, 0.99))
def test_exponential_untilted_closed_form(theta):
    # at t = 0 the tilt is a shifted exponential with rate 1 - theta
    m, v, k3 = measures.make_measure("exponential", 1).factor.tilt_moments(0.0, theta)
    b = 1.0 - theta
    assert (float(m), float(v), float(k3)) == pytest.approx((1 / b - 1, 1 / b**2, 2 / b**3), rel=1e-12)


def test_exponential_tilt_undefined_without_confinement():
    m, _, _ = measures.make_measure("exponential", 1).factor.tilt_moments(0.0, 1.5)
    assert np.isnan(m)


def test_expect_agrees_with_moments():
    f = measures.make_measure("exponential", 1).factor
    m, v, _ = f.tilt_moments(0.5, 0.3)
    assert float(f.expect(lambda x: x, 0.5, 0.3)) == pytest.approx(float(m), abs=1e-12)
    assert float(f.expect(lambda x: (x - m) ** 2, 0.5, 0.3)) == pytest.approx(float(v), rel=1e-10)


@pytest.mark.parametrize("dim", [0, -1, 2.5])
def test_invalid_dimension(dim):
    with pytest.raises(InvalidDimension):
        measures.make_gaussian(dim)


def test_registry():
    assert measures.catalog() == ["cube", "exponential", "gaussian"]
    with pytest.raises(KeyError):
        measures.make_measure("nope", 2)
    with pytest.raises(KeyError):
        measures.register_measure("gaussian", measures.make_gaussian)


def test_log_density_normalized():
    for key in ("gaussian", "exponential", "cube"):
        f = measures.make_measure(key, 1).factor
        lo, hi = max(f.lo, -40.0), min(f.hi, 60.0)
        x = np.linspace(lo, hi, 400_001)
        assert np.trapezoid(f.pdf(x), x) == pytest.approx(1.0, abs=1e-6)


def test_pool_roundtrip(tmp_path):
    m = measures.make_measure("cube", 3)
    pool = measures.draw_pool(m, 1000, seed=42)
    again = measures.draw_pool(m, 1000, seed=42)
    assert np.array_equal(pool.points, again.points)
    measures.save_pool(pool, tmp_path / "p.bin")
    back = measures.load_pool(tmp_path / "p.bin")
    assert np.array_equal(back.points, pool.points) and back.seed == 42
    (tmp_path / "bad.bin").write_bytes(b"junk")
    with pytest.raises(ValueError):
        measures.load_pool(tmp_path / "bad.bin")


def test_sampler_deterministic():
    m = measures.make_measure("exponential", 4)
    assert np.array_equal(m.sampler(7), m.sampler(7))
    assert np.all(m.sampler(7) >= -1)
    assert math.isclose(float(m.log_density(np.zeros(4))), -4.0)
