import numpy as np
import pytest

from hierdiff import verify
from hierdiff.autograd import Tensor
from hierdiff.network import NetworkConfig, ScoreNetwork
from hierdiff.synthdata import SynthSpec

TINY = NetworkConfig(channels=8, heads=2, low_blocks=1, high_blocks=1, mlp_ratio=2, time_features=8)


def test_check_line_format():
    assert verify.Check("loss", "x", True, "d").line() == "[PASS] loss/x: d"
    assert verify.Check("loss", "x", False, "").line().startswith("[FAIL] loss/x")


def test_finite_differences_accept_correct_gradients(sched):
    net = ScoreNetwork(TINY)
    verify.randomize_parameters(net, seed=0)
    worst, probed = verify.finite_difference_check(net, verify.network_loss_fn(net, SynthSpec(), sched), entries=2)
    assert probed > 0 and worst < 1e-5


def test_finite_differences_catch_a_missing_gradient(sched):
    net = ScoreNetwork(TINY)
    verify.randomize_parameters(net, seed=0)
    base = verify.network_loss_fn(net, SynthSpec(), sched)
    w = net.tok_emb

    def leaky():
        # a term computed outside the graph: numeric gradient sees it, analytic does not
        return base() + Tensor(np.array(10.0 * float((w.data ** 2).sum())))

    worst, _ = verify.finite_difference_check(net, leaky, entries=2)
    assert worst > 1e-2


def test_randomize_is_seeded():
    a, b = ScoreNetwork(TINY), ScoreNetwork(TINY)
    verify.randomize_parameters(a, seed=3)
    verify.randomize_parameters(b, seed=3)
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_crashing_suite_is_a_failure(monkeypatch):
    def boom(ctx):
        raise RuntimeError("kaput")

    monkeypatch.setitem(verify.SUITES, "loss", boom)
    lines = []
    checks = verify.run(only=["loss"], emit=lines.append)
    assert len(checks) == 1 and not checks[0].ok
    assert any("kaput" in line for line in lines)


def test_unknown_suite_rejected():
    with pytest.raises(ValueError, match="unknown suites"):
        verify.run(only=["nope"], emit=None)


@pytest.mark.parametrize("name", ["marginals", "diffusion", "loss", "dropout", "routing"])
def test_fast_suites_pass(name):
    checks = verify.run(only=[name], emit=None)
    assert checks and all(c.ok for c in checks), [c.line() for c in checks if not c.ok]
