import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hierdiff.autograd import Tensor, parameter
from hierdiff.conditions import ConditionBundle
from hierdiff.network import (NetworkConfig, ScoreNetwork, kron_upsample_matrix, load_checkpoint, save_checkpoint,
                              upsample_temporal)
from hierdiff.synthdata import SynthSpec, generate
from hierdiff.verify import finite_difference_check, network_loss_fn, randomize_parameters

SMALL = NetworkConfig(channels=16, heads=2, low_blocks=1, high_blocks=1, time_features=8)


def _net(**kw):
    net = ScoreNetwork(dataclasses.replace(SMALL, **kw))
    randomize_parameters(net, seed=1)  # wake up zero-initialised modulation heads
    return net


def _batch(n=3, seed=0):
    c = generate(SynthSpec(), n, seed=seed)
    g = c.grids.copy()
    g[:, :, ::3] = 8
    return g, c.bundle(), c


# --- autograd primitives ------------------------------------------------------


def _numeric(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("op", ["softmax", "layer_norm", "gelu", "silu", "matmul", "broadcast_mul", "getitem"])
def test_autograd_ops_match_finite_differences(op):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 5))
    proj = rng.normal(size=(2, 3, 5 if op == "matmul" else 4))
    proj2 = rng.normal(size=(3, 1))
    fns = {
        "softmax": lambda t: t.softmax(axis=-1),
        "layer_norm": lambda t: t.layer_norm(),
        "gelu": lambda t: t.gelu(),
        "silu": lambda t: t.silu(),
        "matmul": lambda t: t @ w,
        "broadcast_mul": lambda t: t * (t.sum(axis=-1, keepdims=True) * proj2),
        "getitem": lambda t: t[:, ::2] * 2.0,
    }
    f = fns[op]

    def scalar(t):
        out = f(t)
        p = proj if out.shape == proj.shape else np.ones(out.shape)
        return (out * p).sum()

    x = parameter(x0.copy())
    scalar(x).backward()
    num = _numeric(lambda a: float(scalar(Tensor(a)).data), x0)
    np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-8)


def test_autograd_indexing_and_embedding():
    from hierdiff.autograd import embedding

    table = parameter(np.arange(12.0).reshape(4, 3))
    out = embedding(table, np.array([[0, 2], [2, 3]]))
    out.sum().backward()
    np.testing.assert_array_equal(table.grad.sum(axis=1), [3, 0, 6, 3])
    x = parameter(np.ones((3, 4)))
    (x[1:, ::2] * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 0, 0, 0], [3, 0, 3, 0], [3, 0, 3, 0]])


def test_constant_loss_gives_zero_gradients():
    net = _net()
    grads = net.backward(net.parameters()[0].sum() * 0.0 + 3.0)
    assert all(not np.any(g) for g in grads.values())


# --- shapes and heads ---------------------------------------------------------------


@pytest.mark.parametrize("variant,adaln", [("hierarchical", "dual"), ("hierarchical", "single"), ("flat", "dual")])
def test_output_shape(variant, adaln):
    net = _net(variant=variant, adaln=adaln)
    g, b, _ = _batch()
    ls = net.log_score(g, np.array([0.3, 1.0, 2.0]), b)
    assert ls.shape == (3, 4, 8, 8)
    assert np.all(np.isfinite(ls))


def test_zero_heads_give_unit_scores():
    net = _net()
    for name in ("head_low_w", "head_low_b", "head_high_w", "head_high_b"):
        getattr(net, name).data[...] = 0
    g, b, _ = _batch()
    np.testing.assert_array_equal(net.score(g, 1.0, b), 1.0)


def test_embed_component_sums_levels():
    net = _net()
    V, C = 8, SMALL.channels
    toks = np.array([[[1, 8], [0, 3]]])  # (B=1, n=2, L=2)
    t_emb = Tensor(np.zeros((1, C)))
    e = net.embed_component(toks, 2, t_emb).data
    tab = net.tok_emb.data
    np.testing.assert_allclose(e[0, 0], tab[2 * (V + 1) + 1] + tab[3 * (V + 1) + 0])
    np.testing.assert_allclose(e[0, 1], tab[2 * (V + 1) + 8] + tab[3 * (V + 1) + 3])
    with pytest.raises(ValueError):
        net.embed_component(np.array([[[9]]]), 0, t_emb)


def test_input_validation():
    net = _net()
    g, b, _ = _batch()
    with pytest.raises(ValueError):
        net.log_score(g[:, :3], 1.0, b)
    with pytest.raises(ValueError):
        net.log_score(g[:, :, :6], 1.0)
    with pytest.raises(ValueError):
        net.log_score(g, 1.0, ConditionBundle(emo=np.zeros((3, 3), int)))
    with pytest.raises(ValueError):
        NetworkConfig(channels=10, heads=3)


# --- routing --------------------------------------------------------------------


def test_emotion_does_not_reach_low_tier():
    net = _net()
    g, b, c = _batch()
    other = dataclasses.replace(b, emo=(b.emo + 1) % 7)
    sb = np.full(3, 0.7)
    l1, h1 = net.forward(g, sb, b)
    l2, h2 = net.forward(g, sb, other)
    np.testing.assert_array_equal(h1.h_low.data, h2.h_low.data)
    np.testing.assert_array_equal(l1.data[:, :1], l2.data[:, :1])
    assert not np.allclose(h1.h_high.data, h2.h_high.data)


def test_identity_changes_low_tier():
    net = _net()
    g, b, _ = _batch()
    other = dataclasses.replace(b, id=-b.id)
    sb = np.full(3, 0.7)
    _, h1 = net.forward(g, sb, b)
    _, h2 = net.forward(g, sb, other)
    assert not np.allclose(h1.h_low.data, h2.h_low.data)


def test_null_lip_matches_explicit_null_embedding():
    net = _net()
    g, b, _ = _batch()
    sb = np.full(3, 0.7)
    nul = b.with_keep(lip=np.zeros(3, bool))
    dropped = dataclasses.replace(b, lip=None, keep_lip=None)
    np.testing.assert_array_equal(net.log_score(g, sb, nul), net.log_score(g, sb, dropped))


def test_temporal_scale_is_block_constant():
    net = _net()
    g, b, _ = _batch()
    _, hid = net.forward(g, np.full(3, 0.7), b)
    for frames, blocks in zip(hid.gamma_t_frames, hid.gamma_t_blocks):
        np.testing.assert_allclose(frames.data, np.repeat(blocks.data, 4, axis=-1))


def test_single_scale_ablation_has_no_temporal_scale():
    net = _net(adaln="single")
    g, b, _ = _batch()
    _, hid = net.forward(g, np.full(3, 0.7), b)
    assert hid.gamma_t_frames is None


@given(st.integers(1, 4), st.integers(1, 30))
def test_kron_upsampling(n, d):
    M = kron_upsample_matrix(n, d)
    assert M.shape == (n, n * d)
    x = np.arange(1.0, n + 1)
    np.testing.assert_array_equal(x @ M, np.repeat(x, d))
    np.testing.assert_array_equal(upsample_temporal(x[None], d).data[0], np.repeat(x, d))


# --- gradients and checkpoints ------------------------------------------------------


@pytest.mark.parametrize("variant,adaln", [("hierarchical", "dual"), ("flat", "dual")])
def test_network_gradients_finite_difference(variant, adaln, sched):
    net = _net(variant=variant, adaln=adaln)
    loss_fn = network_loss_fn(net, SynthSpec(), sched, batch=2, seed=3)
    worst, probed = finite_difference_check(net, loss_fn, entries=1, seed=0)
    assert probed > 20
    assert worst < 1e-5


def test_checkpoint_roundtrip(tmp_path):
    net = _net()
    p = tmp_path / "n.ckpt"
    save_checkpoint(p, net, extra={"note": 1})
    back, extra = load_checkpoint(p, expect=net.config)
    assert extra == {"note": 1}
    for (n1, a), (n2, b) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        load_checkpoint(p, expect=dataclasses.replace(net.config, channels=32))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
