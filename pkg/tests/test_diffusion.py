import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TableOracle
from hierdiff.diffusion import (absorbing_rate_matrix, euler_probabilities, forward_sample, reverse_step,
                                true_concrete_score)
from hierdiff.guidance import GuidanceConfig, sample
from hierdiff.synthdata import grid_index, total_variation


def test_rate_matrix_structure():
    V = 5
    Q = absorbing_rate_matrix(V)
    assert Q.shape == (V + 1, V + 1)
    np.testing.assert_allclose(Q.sum(axis=0), 0.0)
    off = Q - np.diag(np.diag(Q))
    assert np.all(off[:V] == 0)  # nothing flows between clean tokens or out of MASK
    assert np.all(off[V, :V] == 1.0) and Q[V, V] == 0.0


def test_forward_t0_is_identity(sched):
    g = np.random.default_rng(0).integers(0, 4, size=(3, 2, 5))
    np.testing.assert_array_equal(forward_sample(g, sched, 0.0, 1, 4), g)


@pytest.mark.parametrize("target", ["ln2", "horizon"])
def test_forward_mask_fraction(sched, target):
    n = 100_000
    t = sched.time_for_sigma_bar(math.log(2)) if target == "ln2" else sched.horizon
    p = 0.5 if target == "ln2" else 1 - sched.eps
    frac = (forward_sample(np.zeros((n // 10, 1, 10), dtype=np.int64), sched, t, 3, 4) == 4).mean()
    assert abs(frac - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_forward_rejects_masked_input(sched):
    with pytest.raises(ValueError):
        forward_sample(np.array([[[0, 4]]]), sched, 0.5, 0, 4)


def test_forward_is_seeded(sched):
    g = np.zeros((10, 2, 6), dtype=np.int64)
    np.testing.assert_array_equal(forward_sample(g, sched, 0.5, 7, 3), forward_sample(g, sched, 0.5, 7, 3))


def test_concrete_score_values(sched):
    g0 = np.array([[2, 0, 1]])
    gt = np.array([[3, 0, 3]])
    t = sched.time_for_sigma_bar(math.log(2))
    tgt = true_concrete_score(gt, g0, sched, t, 3)
    np.testing.assert_allclose(tgt.scores[0, 0], [0, 0, 1.0], atol=1e-12)
    assert tgt.num_targets == 2 and not tgt.scores[0, 1].any()
    small = true_concrete_score(gt, g0, sched, None, 3, sigma_bar=0.01)
    assert small.scores[0, 0, 2] == pytest.approx(math.exp(-0.01) / (1 - math.exp(-0.01)), rel=1e-12)


def test_concrete_score_scale_consistency(sched):
    g0 = np.array([[[1, 2, 0, 1]]])
    gt = np.array([[[3, 3, 0, 3]]])
    a, b = 0.2, 1.7
    sa = true_concrete_score(gt, g0, sched, None, 3, sigma_bar=a).scores
    sb = true_concrete_score(gt, g0, sched, None, 3, sigma_bar=b).scores
    ratio = (math.exp(-b) / -math.expm1(-b)) / (math.exp(-a) / -math.expm1(-a))
    nz = sa > 0
    np.testing.assert_allclose(sb[nz] / sa[nz], ratio, rtol=1e-12)
    np.testing.assert_array_equal(sb[~nz], 0)


def test_concrete_score_unmasked_and_inconsistent(sched):
    g0 = np.array([[0, 1]])
    assert true_concrete_score(g0, g0, sched, 0.5, 2).num_targets == 0
    with pytest.raises(ValueError):
        true_concrete_score(np.array([[1, 1]]), g0, sched, 0.5, 2)


def test_reverse_zero_scores_do_nothing(sched):
    gt = np.array([[[4, 1, 4]]])
    out = reverse_step(gt, np.zeros((1, 1, 3, 4)), sched, 0.5, 0.1, 0, 4)
    np.testing.assert_array_equal(out, gt)


def test_reverse_certain_unmask(sched):
    gt = np.array([[[4]]])
    scores = np.zeros((1, 1, 1, 4))
    scores[..., 2] = 1e3
    for seed in range(20):
        assert reverse_step(gt, scores, sched, 0.5, 0.1, seed, 4)[0, 0, 0] == 2


def test_reverse_errors(sched):
    gt = np.array([[[3, 0]]])
    with pytest.raises(ValueError):
        reverse_step(gt, -np.ones((1, 1, 2, 3)), sched, 0.5, 0.1, 0, 3)
    with pytest.raises(ValueError):
        reverse_step(gt, np.ones((1, 1, 2, 3)), sched, 0.1, 0.2, 0, 3)
    with pytest.raises(ValueError):
        reverse_step(gt, np.ones((1, 1, 2, 3)), sched, 0.1, 0.0, 0, 3)


@given(st.integers(0, 2 ** 31), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_reverse_never_touches_unmasked(seed, t, frac):
    rng = np.random.default_rng(seed)
    V = 4
    g0 = rng.integers(0, V, size=(3, 2, 5))
    gt = np.where(rng.random(g0.shape) < 0.6, V, g0)
    scores = rng.exponential(size=g0.shape + (V,)) * 5
    from hierdiff.schedule import NoiseSchedule
    out = reverse_step(gt, scores, NoiseSchedule(), t, t * frac if frac > 0 else t, seed, V)
    keep = gt != V
    np.testing.assert_array_equal(out[keep], gt[keep])
    if frac in (0.0, 1.0):  # these reach t=0: final step
        assert np.all(out != V)


def test_euler_probabilities_clamp():
    p = euler_probabilities(np.array([[3.0, 1.0], [0.1, 0.1]]), 0.5)
    np.testing.assert_allclose(p.sum(axis=-1), [1.0, 0.1])


def test_two_token_sampler_recovers_distribution(sched):
    probs = np.array([0.1, 0.4, 0.3, 0.2])  # joint over 1x2 grids with V=2
    oracle = TableOracle(probs, (1, 2), 2)
    n = 50_000
    out = sample(oracle, None, GuidanceConfig(steps=256), sched, (n, 1, 2), 5, 2)
    q = np.bincount(grid_index(out, 2), minlength=4) / n
    assert total_variation(probs, q) < 0.05
