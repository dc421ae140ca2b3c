"""Invariant battery run by ``hierdiff verify``.

Every check returns a :class:`Check`; suites group them so ``--only`` can select
one.  A failing check is a report line, never an exception, unless the check
itself crashes, in which case the crash is reported as a failure.
"""

from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass, replace

import numpy as np

from .autograd import Tensor, as_tensor
from .conditions import ConditionBundle
from .evaluation import lip_agreement
from .diffusion import absorbing_rate_matrix, forward_sample, reverse_step, true_concrete_score
from .guidance import GuidanceConfig, OracleNetwork, guided_log_score, sample
from .network import NetworkConfig, ScoreNetwork, upsample_temporal
from .schedule import NoiseSchedule
from .synthdata import (SynthSpec, enumerate_distribution, generate, grid_index,
                        oracle_posterior, total_variation)
from .training import (apply_condition_dropout, dse_loss, dse_loss_tensor, identity_loss_tensor,
                        score_entropy, score_entropy_grad)


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.suite}/{self.name}: {self.detail}"


# --- finite differences -----------------------------------------------------------


def randomize_parameters(net, seed: int, scale: float = 0.05) -> None:
    """Perturb every parameter so zero-initialised gates do not hide any path."""
    rng = np.random.default_rng(seed)
    for p in net.parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)


def finite_difference_check(net, loss_fn, h: float = 1e-5, entries: int | None = 3,
                            seed: int = 0) -> tuple[float, int]:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` rebuilds the loss Tensor from the current parameters.  Checks
    ``entries`` random coordinates of every parameter tensor (all when None).
    Returns the largest relative error and the number of coordinates probed.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  The floor
    ``1e5 * eps_mach * |loss| / h`` sits five decades above the rounding noise of
    a central difference, so entries too small to resolve are held to an
    absolute bound instead of a meaningless relative one.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    floor = 1e5 * np.finfo(np.float64).eps * max(abs(float(loss.data)), 1.0) / h
    grads = net.backward(loss)
    worst, probed = 0.0, 0
    for name, p in net.named_parameters():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if entries is None else rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
            probed += 1
    return worst, probed


def network_loss_fn(net: ScoreNetwork, spec: SynthSpec, sched: NoiseSchedule, batch: int = 2, seed: int = 0,
                    lambda_id: float = 100.0):
    """Fixed-batch total loss closure used by the gradient checks."""
    corpus = generate(spec, batch, seed=seed)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.3, 0.9, size=batch) * sched.horizon
    grid_t = forward_sample(corpus.grids, sched, t, seed, spec.vocab)
    bundle = corpus.bundle()
    if batch > 1:
        bundle = bundle.with_keep(emo=np.arange(batch) != 1)
    sig, sb = sched.sigma(t), sched.sigma_bar(t)

    def fn() -> Tensor:
        logits, _ = net.forward(grid_t, sb, bundle)
        l_score = dse_loss_tensor(logits, grid_t, corpus.grids, sig, sb, spec.vocab)
        return l_score + identity_loss_tensor(net.predict_identity(corpus.face), corpus.identity) * lambda_id

    return fn


# --- suites ---------------------------------------------------------------


def _marginals(ctx) -> list[Check]:
    sched = ctx["schedule"]
    T = sched.horizon
    out = []
    ts = np.linspace(0.0, T, 401)
    sb = sched.sigma_bar(ts)
    mono = bool(np.all(np.diff(sb) >= 0) and abs(sb[0]) < 1e-12)
    out.append(Check("marginals", "sigma_bar monotone from zero", mono,
                     f"min increment {np.diff(sb).min():.3g}, sigma_bar(0)={sb[0]:.3g}"))
    h = 1e-6 * T
    mid = ts[1:-1]
    num = (sched.sigma_bar(mid + h) - sched.sigma_bar(mid - h)) / (2 * h)
    rel = np.max(np.abs(num - sched.sigma(mid)) / np.maximum(np.abs(num), 1e-12))
    out.append(Check("marginals", "sigma is the derivative of sigma_bar", bool(rel < 1e-3), f"max rel diff {rel:.2e}"))
    # Markov composition: masking over [0,s] then [s,t] equals masking over [0,t]
    s, t = 0.3 * T, 0.8 * T
    p_st = -math.expm1(-(float(sched.sigma_bar(t)) - float(sched.sigma_bar(s))))
    comp = 1 - (1 - float(sched.mask_probability(s))) * (1 - p_st)
    err = abs(comp - float(sched.mask_probability(t)))
    out.append(Check("marginals", "two-step masking composes", bool(err < 1e-12), f"|diff| {err:.2e}"))
    if sched.kind == "log_linear":
        u = np.linspace(0.0, 1.0, 11)
        lin = np.max(np.abs(sched.mask_probability(u * T) - u * (1 - sched.eps)))
        out.append(Check("marginals", "log-linear mask fraction linear in t", bool(lin < 1e-10), f"max dev {lin:.2e}"))
    n_tok = 100_000
    worst = 0.0
    grid0 = np.zeros((n_tok // 8, 1, 8), dtype=np.int64)
    for i, ti in enumerate(np.linspace(0.05, 1.0, 10) * T):
        frac = float((forward_sample(grid0, sched, ti, [ctx["seed"], i], 2) == 2).mean())
        p = float(sched.mask_probability(ti))
        sd = math.sqrt(max(p * (1 - p), 1e-12) / n_tok)
        worst = max(worst, abs(frac - p) / sd)
    out.append(Check("marginals", "empirical mask fraction within 3 sigma", bool(worst <= 3.0),
                     f"worst z {worst:.2f} over 10 times x {n_tok} tokens"))
    return out


def _diffusion(ctx) -> list[Check]:
    sched = ctx["schedule"]
    V = 6
    Q = absorbing_rate_matrix(V)
    out = [Check("diffusion", "rate matrix columns sum to zero", bool(np.allclose(Q.sum(axis=0), 0)), "")]
    g0 = np.array([[[1, 2, 3]]])
    gt = np.array([[[V, 2, V]]])
    t_ln2 = float(sched.time_for_sigma_bar(math.log(2)))
    tgt = true_concrete_score(gt, g0, sched, t_ln2, V)
    ok = math.isclose(tgt.scores[0, 0, 0, 1], 1.0, rel_tol=1e-9) and tgt.scores[0, 0, 1].sum() == 0
    out.append(Check("diffusion", "concrete score is 1 at sigma_bar=ln 2", bool(ok), f"{tgt.scores[0, 0, 0, 1]:.12f}"))
    scores = np.full((1, 1, 3, V), 1.0 / V)
    nxt = reverse_step(gt, scores, sched, t_ln2, t_ln2, 0, V, final=True)
    out.append(Check("diffusion", "final reverse step unmasks everything", bool(np.all(nxt != V) and nxt[0, 0, 1] == 2), ""))
    return out


def _loss(ctx) -> list[Check]:
    sched = ctx["schedule"]
    rng = np.random.default_rng(ctx["seed"])
    V = 5
    g0 = rng.integers(0, V, size=(4, 2, 6))
    t = rng.uniform(0.2, 0.9, size=4) * sched.horizon
    gt = forward_sample(g0, sched, t, 1, V)
    gt[:, 0, 0] = V  # at least one masked entry per sample
    tgt = true_concrete_score(gt, g0, sched, t, V)
    w = sched.sigma(t)
    # at s = c the analytic gradient vanishes wherever c > 0; zero-target entries
    # are evaluated at a vanishing score, where the gradient also tends to zero
    s = np.where(tgt.scores > 0, tgt.scores, 1e-300)
    grad = score_entropy_grad(s, tgt.scores, tgt.masked, w)
    gmax = float(np.abs(np.where(tgt.scores > 0, grad, 0.0)).max())
    base = score_entropy(s, tgt.scores, tgt.masked, w)
    out = [Check("loss", "zero gradient at the true score", bool(gmax < 1e-8), f"max |dL/ds| {gmax:.2e}"),
           Check("loss", "minimum value is zero", bool(abs(base) < 1e-9), f"{base:.2e}")]
    worse = 0
    for _ in range(100):
        pert = s * np.exp(0.3 * rng.standard_normal(s.shape)) + (tgt.scores == 0) * rng.uniform(0.01, 1, s.shape)
        worse += score_entropy(pert, tgt.scores, tgt.masked, w) > base
    out.append(Check("loss", "random perturbations increase loss", worse == 100, f"{worse}/100"))
    per = score_entropy(np.full((1, 1, 1), 2.0), np.ones((1, 1, 1)), np.ones((1, 1), bool), 1.0)
    out.append(Check("loss", "c=1, s=2 term value", bool(abs(per - (1 - math.log(2))) < 1e-12), f"{per:.6f}"))
    # dse_loss with oracle-matched scores reproduces the same zero
    val = dse_loss(np.where(tgt.scores > 0, tgt.scores, 1e-300), gt, g0, sched, t, V)
    out.append(Check("loss", "dse_loss is zero at the target", bool(abs(val) < 1e-9), f"{val:.2e}"))
    return out


def _gradients(ctx) -> list[Check]:
    sched = ctx["schedule"]
    out = []
    tiny_spec = SynthSpec(levels=3, split=1, vocab=4, frames=4, emotion_downsample=2, phonemes=3, speakers=3,
                          emotions=3, id_dim=4)
    tiny = ScoreNetwork(NetworkConfig(levels=3, split=1, vocab=4, channels=8, heads=2, low_blocks=1, high_blocks=1,
                                      mlp_ratio=2, lip_dim=3, id_dim=4, face_dim=3, emo_classes=3,
                                      emotion_downsample=2, time_features=8, seed=ctx["seed"]))
    randomize_parameters(tiny, ctx["seed"], scale=0.05)
    err, n = finite_difference_check(tiny, network_loss_fn(tiny, tiny_spec, sched), entries=None, seed=ctx["seed"])
    out.append(Check("gradients", "tiny network (C=8, L=4), every entry", bool(err < 1e-4), f"max rel err {err:.2e} over {n}"))
    spec, ncfg = ctx["synth"], ctx["network"]
    for variant, adaln in (("hierarchical", "dual"), ("hierarchical", "single"), ("flat", "dual")):
        net = ScoreNetwork(replace(ncfg, variant=variant, adaln=adaln))
        randomize_parameters(net, ctx["seed"], scale=0.05)
        err, n = finite_difference_check(net, network_loss_fn(net, spec, sched), entries=2, seed=ctx["seed"])
        out.append(Check("gradients", f"desk network {variant}/{adaln}, every tensor",
                         bool(err < 1e-4), f"max rel err {err:.2e} over {n}"))
    net = ScoreNetwork(ncfg)
    fn = network_loss_fn(net, spec, sched)
    g1 = net.backward(fn())
    g2 = net.backward(fn() * 2.0)
    ok = all(np.array_equal(2 * g1[k], g2[k]) for k in g1)
    out.append(Check("gradients", "doubling the loss doubles gradients", ok, ""))
    return out


def _routing(ctx) -> list[Check]:
    spec, ncfg = ctx["synth"], ctx["network"]
    out = []
    net = ScoreNetwork(ncfg)
    randomize_parameters(net, ctx["seed"], scale=0.1)
    corpus = generate(spec, 3, seed=ctx["seed"])
    sb = np.array([0.2, 1.0, 3.0])
    b1 = corpus.bundle()
    emo2 = (corpus.emotion + 1) % spec.emotions
    b2 = replace(b1, emo=emo2)
    grid = forward_sample(corpus.grids, ctx["schedule"], 0.5, 0, spec.vocab)
    if ncfg.variant == "hierarchical":
        l1, h1 = net.forward(grid, sb, b1)
        l2, h2 = net.forward(grid, sb, b2)
        k = ncfg.split
        ok = np.array_equal(h1.h_low.data, h2.h_low.data) and np.array_equal(l1.data[:, :k], l2.data[:, :k])
        out.append(Check("routing", "emotion leaves the low tier bitwise unchanged", bool(ok), ""))
        out.append(Check("routing", "emotion changes the high tier", bool(not np.array_equal(l1.data[:, k:], l2.data[:, k:])), ""))
        _, h3 = net.forward(grid, sb, replace(b1, id=-b1.id))
        out.append(Check("routing", "identity changes the low tier", bool(np.abs(h3.h_low.data - h1.h_low.data).sum() > 0), ""))
        t_emb = net.time_embedding(sb)
        m_low = net.embed_component(grid[:, :k], 0, t_emb)
        c_id = net.id_features(b1, len(grid))
        B, L, C = m_low.shape
        explicit = as_tensor(np.broadcast_to(net.null_lip.data, (B, L, C)).copy())
        ok = np.array_equal(net.low_forward(m_low, None, c_id, t_emb).data,
                            net.low_forward(m_low, explicit, c_id, t_emb).data)
        out.append(Check("routing", "NULL lip equals the explicit null embedding", bool(ok), ""))
        frames = h1.gamma_t_frames or []
        D = ncfg.emotion_downsample
        block_ok = all(np.array_equal(f.data, np.repeat(g.data, D, axis=-1))
                       for f, g in zip(frames, h1.gamma_t_blocks or []))
        out.append(Check("routing", "temporal scales are block-constant", bool(block_ok and frames or ncfg.adaln == "single"),
                         f"D={D}, {len(frames)} blocks"))
    up = upsample_temporal(np.array([[1.5, -2.0]]), 25).data
    ok = up.shape == (1, 50) and np.all(up[0, :25] == 1.5) and np.all(up[0, 25:] == -2.0)
    out.append(Check("routing", "Kronecker up-sampling (2 blocks, D=25)", bool(ok), ""))
    return out


def _dropout(ctx) -> list[Check]:
    n = 100_000
    rng = np.random.default_rng([ctx["seed"], 0xD0])
    b = ConditionBundle(lip=np.zeros((n, 1, 1)), id=np.zeros((n, 1)), emo=np.zeros((n, 1), dtype=int))
    d = apply_condition_dropout(b, rng, 0.1, 0.1)
    all_null = float(d.all_null().mean())
    sd = math.sqrt(0.1 * 0.9 / n)
    out = [Check("dropout", "all-NULL fraction 0.10", bool(abs(all_null - 0.1) <= 3 * sd), f"{all_null:.4f}")]
    sd2 = math.sqrt(0.19 * 0.81 / n)
    for c in ("lip", "id", "emo"):
        frac = float((~d.keep(c)).mean())
        out.append(Check("dropout", f"{c} NULL fraction 0.19", bool(abs(frac - 0.19) <= 3 * sd2), f"{frac:.4f}"))
    return out


def _guidance(ctx) -> list[Check]:
    spec, ncfg = ctx["synth"], ctx["network"]
    net = ScoreNetwork(ncfg)
    randomize_parameters(net, ctx["seed"], scale=0.1)
    corpus = generate(spec, 4, seed=ctx["seed"])
    b = corpus.bundle().with_keep(emo=np.array([True, False, True, True]))
    grid = forward_sample(corpus.grids, ctx["schedule"], 0.6, 0, spec.vocab)
    sb = 0.9
    cond = net.log_score(grid, sb, b)
    unc = net.log_score(grid, sb, None)
    zero = dict(w_id=0.0, w_emo=0.0, w_lip=0.0)
    g1 = guided_log_score(net, grid, sb, b, GuidanceConfig(w_all=1.0, **zero))
    g0 = guided_log_score(net, grid, sb, b, GuidanceConfig(w_all=0.0, **zero))
    out = [Check("guidance", "w_all=1, w_c=0 gives the conditional score", bool(np.array_equal(g1, cond)), ""),
           Check("guidance", "w_all=0, w_c=0 gives the unconditional score", bool(np.array_equal(g0, unc)), "")]
    allnull = b.with_keep(lip=np.zeros(4, bool), id=np.zeros(4, bool), emo=np.zeros(4, bool))
    gn = guided_log_score(net, grid, sb, allnull, GuidanceConfig())
    out.append(Check("guidance", "all-NULL bundle ignores weights", bool(np.array_equal(gn, unc)), ""))
    # lip agreement rises with w_lip under exact oracle scores; w_all=0 keeps the
    # joint conditional term from saturating agreement on its own
    small = replace(spec, levels=2, split=1, frames=4, emotion_downsample=2)
    n = 600
    ev = generate(small, n, seed=ctx["seed"])
    rates = []
    for w in (0.0, 1.0, 2.0):
        g = GuidanceConfig(w_all=0.0, w_lip=w, steps=16)
        grids = sample(OracleNetwork(small), ev.bundle(), g, ctx["schedule"], (n, 2, 4), ctx["seed"], small.vocab)
        rates.append(lip_agreement(small, grids, ev.phonemes, ev.speaker))
    out.append(Check("guidance", "lip agreement increases with w_lip", bool(rates[0] < rates[1] < rates[2]),
                     " < ".join(f"{r:.3f}" for r in rates)))
    return out


def _oracle(ctx) -> list[Check]:
    sched = ctx["schedule"]
    spec = SynthSpec(levels=2, frames=2, vocab=4, split=1, emotion_downsample=2, seed=ctx["synth"].seed)
    p = enumerate_distribution(spec)
    out = []
    n = ctx.get("tv_samples", 50_000)
    for steps, bound in ((256, 0.05), (64, 0.10)):
        g = sample(OracleNetwork(spec), None, GuidanceConfig(steps=steps), sched, (n, 2, 2), ctx["seed"], spec.vocab)
        q = np.bincount(grid_index(g, spec.vocab), minlength=len(p)) / n
        tv = total_variation(p, q)
        out.append(Check("oracle", f"Euler sampling TV at {steps} steps < {bound}", bool(tv < bound), f"TV {tv:.4f} over {n} samples"))
    # posterior against brute-force conditionals for one masked grid
    dist = enumerate_distribution(spec)
    grids = np.array(np.unravel_index(np.arange(len(dist)), (4,) * 4)).T.reshape(-1, 2, 2)
    gt = grids[7].copy()
    gt[0, 1] = spec.vocab
    gt[1, 0] = spec.vocab
    post = oracle_posterior(spec, gt[None])[0]
    keep = (grids[:, 0, 0] == gt[0, 0]) & (grids[:, 1, 1] == gt[1, 1])
    brute = np.bincount(grids[keep, 0, 1], weights=dist[keep], minlength=4)
    brute /= brute.sum()
    err = float(np.abs(post[0, 1] - brute).max())
    out.append(Check("oracle", "posterior matches enumeration", bool(err < 1e-10), f"max abs err {err:.2e}"))
    return out


SUITES = {
    "marginals": _marginals,
    "diffusion": _diffusion,
    "loss": _loss,
    "dropout": _dropout,
    "routing": _routing,
    "guidance": _guidance,
    "gradients": _gradients,
    "oracle": _oracle,
}


def run(synth: SynthSpec | None = None, network: NetworkConfig | None = None,
        schedule: NoiseSchedule | None = None, only=None, seed: int = 0, emit=print, **extra) -> list[Check]:
    """Run the selected suites and stream one line per check through ``emit``."""
    ctx = {"synth": synth or SynthSpec(), "network": network or NetworkConfig(),
           "schedule": schedule or NoiseSchedule(), "seed": seed, **extra}
    names = list(SUITES) if not only else list(only)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites {sorted(unknown)}; choose from {list(SUITES)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        try:
            checks = SUITES[name](ctx)
        except Exception as exc:  # a crashing suite is a failed check
            checks = [Check(name, "suite crashed", False, f"{type(exc).__name__}: {exc}")]
            if emit is not None:
                emit(traceback.format_exc())
        for c in checks:
            if emit is not None:
                emit(c.line())
        if emit is not None:
            emit(f"  ({name}: {time.perf_counter() - t0:.1f}s)")
        results.extend(checks)
    return results
