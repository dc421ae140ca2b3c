import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from hierdiff.diffusion import forward_sample
from hierdiff.schedule import NoiseSchedule, mask_probability_from_sigma_bar


def test_sigma_bar_at_zero(sched):
    assert sched.sigma_bar(0.0) == 0.0
    assert NoiseSchedule("linear_sigma").sigma_bar(0.0) == 0.0


def test_log_linear_half_time():
    s = NoiseSchedule(eps=1e-3)
    sb = float(s.sigma_bar(0.5))
    # analytic solution of 1 - exp(-sb) = (1 - eps) / 2
    assert sb == pytest.approx(-math.log(1 - 0.999 / 2), rel=1e-14)
    assert -math.expm1(-sb) == pytest.approx(0.999 / 2, abs=1e-15)


@pytest.mark.parametrize("kind", ["log_linear", "linear_sigma"])
@pytest.mark.parametrize("t", [0.1, 0.5, 0.9, 1.0])
def test_sigma_bar_matches_quadrature(kind, t):
    s = NoiseSchedule(kind, horizon=1.0)
    val, _ = quad(lambda u: float(s.sigma(u)), 0.0, t, epsabs=1e-13, epsrel=1e-12)
    assert float(s.sigma_bar(t)) == pytest.approx(val, rel=1e-9)


def test_constant_rate_integrates_linearly():
    s = NoiseSchedule("linear_sigma", sigma_min=2.5, sigma_max=2.5)
    for t in (0.0, 0.3, 1.0):
        assert float(s.sigma_bar(t)) == pytest.approx(2.5 * t, abs=1e-15)


def test_log_linear_mask_fraction_is_linear(sched):
    t = np.linspace(0, 1, 101)
    dev = sched.mask_probability(t) - t / sched.horizon * sched.mask_probability(sched.horizon)
    assert np.max(np.abs(dev)) < 1e-10


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_monotone_and_positive(a, b):
    for s in (NoiseSchedule(), NoiseSchedule("linear_sigma")):
        lo, hi = sorted((a, b))
        assert s.sigma_bar(lo) <= s.sigma_bar(hi)
        assert s.mask_probability(lo) <= s.mask_probability(hi) < 1
        if hi > 0:
            assert s.sigma(hi) > 0


def test_mask_probability_examples():
    assert mask_probability_from_sigma_bar(0.0) == 0.0
    assert mask_probability_from_sigma_bar(math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert abs(1 - mask_probability_from_sigma_bar(20.0)) < 1e-8


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_range_errors(sched, t):
    with pytest.raises(ValueError):
        sched.sigma_bar(t)


def test_inverse(sched):
    for sb in (0.01, math.log(2), 3.0):
        assert float(sched.sigma_bar(sched.time_for_sigma_bar(sb))) == pytest.approx(sb, rel=1e-12)


def test_markov_composition_by_simulation(sched):
    n = 100_000
    t1, t2 = 0.35, 0.8
    grid = np.zeros((n // 10, 1, 10), dtype=np.int64)
    once = forward_sample(grid, sched, t2, 11, 2) == 2
    first = forward_sample(grid, sched, t1, 12, 2)
    inc = -math.expm1(-(float(sched.sigma_bar(t2)) - float(sched.sigma_bar(t1))))
    extra = np.random.default_rng(13).random(grid.shape) < inc
    twice = (first == 2) | extra
    p = float(sched.mask_probability(t2))
    sd = math.sqrt(p * (1 - p) / n)
    assert abs(once.mean() - p) < 3 * sd
    assert abs(twice.mean() - p) < 3 * sd


def test_invalid_configs():
    with pytest.raises(ValueError):
        NoiseSchedule("cosine")
    with pytest.raises(ValueError):
        NoiseSchedule(eps=0.0)
