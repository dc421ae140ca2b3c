"""Command line entry point: ``hierdiff {gen-data,train,sample,eval,verify}``.

Exit codes are 0 on success, 1 when verification fails and 2 on usage errors or
runtime faults (including a non-finite training loss).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import math
import os
import sys

import numpy as np

from .conditions import ConditionBundle
from .config import ConfigError, ExperimentConfig
from .evaluation import (argmax_accuracy, bayes_rate, emotion_agreement, lip_agreement, make_heldout,
                         model_dse, oracle_score_fn)
from .guidance import GuidanceConfig, OracleNetwork, sample
from .network import ScoreNetwork, load_checkpoint, save_checkpoint
from .synthdata import (enumerate_distribution, generate, grid_index, load_corpus, read_sidecar,
                        save_corpus, total_variation)
from .token_space import write_corpus
from .training import TrainingDiverged, train_loop, write_trace

log = logging.getLogger("hierdiff")

EXIT_OK, EXIT_VERIFY, EXIT_FAULT = 0, 1, 2


class Fault(RuntimeError):
    """Runtime failure reported with exit code 2."""


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("HCDT_THREADS", "1")
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


@contextlib.contextmanager
def _thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


# --- config plumbing ------------------------------------------------------------


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "flat_ablation", False):
        cfg = cfg.replace("network", variant="flat")
    if getattr(args, "single_scale_adaln", False):
        cfg = cfg.replace("network", adaln="single")
    overrides = {k: getattr(args, k, None) for k in ("iters", "lr", "batch")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None and args.command == "train":
        overrides["seed"] = args.seed
        cfg = cfg.replace("network", seed=args.seed)
    if overrides:
        cfg = cfg.replace("train", **overrides)
    g = {}
    for flag in ("steps", "w_all", "w_id", "w_emo", "w_lip"):
        v = getattr(args, flag, None)
        if v is not None:
            g[flag] = v
    if g:
        cfg = cfg.replace("guidance", **g)
    return cfg


def _config_from_checkpoint(extra: dict, fallback: ExperimentConfig) -> ExperimentConfig:
    doc = extra.get("experiment")
    return fallback if doc is None else ExperimentConfig.from_dict(doc)


def _load_model(args, cfg: ExperimentConfig):
    """Return ``(score network, experiment config)`` from ``--ckpt`` or the oracle."""
    if getattr(args, "oracle", False):
        return OracleNetwork(cfg.synth), cfg
    if not args.ckpt:
        raise Fault("either --ckpt or --oracle is required")
    try:
        net, extra = load_checkpoint(args.ckpt)
    except (OSError, ValueError) as exc:
        raise Fault(f"cannot load checkpoint: {exc}") from exc
    ck_cfg = _config_from_checkpoint(extra, cfg)
    if args.config is not None and ck_cfg.state_space != cfg.state_space:
        raise Fault(f"checkpoint state space {ck_cfg.state_space} does not match config {cfg.state_space}")
    if net.config != ck_cfg.network:
        raise Fault("checkpoint parameters do not match its recorded network config")
    guidance = cfg.guidance if args.config is not None else ck_cfg.guidance
    ck_cfg = dataclasses.replace(ck_cfg, guidance=guidance)
    # guidance flags always win
    return net, _apply_guidance_flags(args, ck_cfg)


def _apply_guidance_flags(args, cfg: ExperimentConfig) -> ExperimentConfig:
    g = {f: getattr(args, f) for f in ("steps", "w_all", "w_id", "w_emo", "w_lip") if getattr(args, f, None) is not None}
    return cfg.replace("guidance", **g) if g else cfg


# --- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise argparse.ArgumentTypeError("--n must be >= 1")
    cfg = _experiment(args)
    seed = [cfg.synth.seed, 1] if args.seed is None else [args.seed, 1]
    corpus = generate(cfg.synth, args.n, seed=seed)
    try:
        save_corpus(args.out, corpus, cfg.synth)
    except OSError as exc:
        raise Fault(f"cannot write corpus: {exc}") from exc
    print(f"wrote {args.n} records to {args.out} (+ sidecar)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    try:
        corpus = load_corpus(args.corpus, cfg.synth)
    except (OSError, ValueError, KeyError) as exc:
        raise Fault(f"cannot read corpus: {exc}") from exc
    net = ScoreNetwork(cfg.network)
    metrics = args.metrics or args.out + ".csv"
    rows = []
    try:
        result = train_loop(cfg.train, corpus, net, cfg.schedule, callback=rows.append)
    except TrainingDiverged as exc:
        write_trace(metrics, rows)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    write_trace(metrics, result.trace)
    save_checkpoint(args.out, net, extra={"experiment": cfg.to_dict()})
    print(f"trained {cfg.train.iters} iterations; final loss {result.final_loss:.6g}; "
          f"checkpoint {args.out}; metrics {metrics}")
    return EXIT_OK


def _condition_bundle(records: list[dict], net, lip_dim: int, id_dim: int, n_emo: int) -> ConditionBundle:
    """Bundle from sidecar-style records; a null or missing field is NULL for that record."""
    B = len(records)
    keep = {c: np.zeros(B, bool) for c in ("lip", "id", "emo")}
    lip, ident, emo, face_rows = [], np.zeros((B, id_dim)), np.zeros((B, n_emo), np.int64), {}
    L = None
    for i, r in enumerate(records):
        if r.get("lip") is not None:
            keep["lip"][i] = True
            L = len(r["lip"])
        if r.get("identity_target") is not None:
            keep["id"][i] = True
            ident[i] = r["identity_target"]
        elif r.get("face") is not None and hasattr(net, "predict_identity"):
            keep["id"][i] = True
            face_rows[i] = r["face"]
        if r.get("emotions") is not None:
            keep["emo"][i] = True
            emo[i] = r["emotions"]
    if face_rows:
        idx = sorted(face_rows)
        ident[idx] = net.predict_identity(np.asarray([face_rows[i] for i in idx])).data
    lip_arr = None
    if L is not None:
        lip_arr = np.zeros((B, L, lip_dim))
        for i, r in enumerate(records):
            if r.get("lip") is not None:
                lip_arr[i] = r["lip"]
    return ConditionBundle(lip=lip_arr, id=ident, emo=emo, keep_lip=keep["lip"], keep_id=keep["id"],
                           keep_emo=keep["emo"], batch=B)


def cmd_sample(args) -> int:
    cfg = _apply_guidance_flags(args, ExperimentConfig.load(args.config))
    net, cfg = _load_model(args, cfg)
    try:
        records = read_sidecar(args.conditions)
    except (OSError, ValueError) as exc:
        raise Fault(f"cannot read conditions: {exc}") from exc
    if not records:
        raise Fault("conditions file is empty")
    ss = cfg.state_space
    bundle = _condition_bundle(records, net, cfg.network.lip_dim, cfg.network.id_dim, ss.emotion_frames)
    seed = 0 if args.seed is None else args.seed
    grids = sample(net, bundle, cfg.guidance, cfg.schedule, (len(records), ss.levels, ss.frames), seed, ss.vocab)
    write_corpus(args.out, grids, ss)
    print(f"wrote {len(grids)} sampled grids to {args.out} ({cfg.guidance.steps} steps)")
    return EXIT_OK


def evaluate(net, cfg: ExperimentConfig, corpus, seed: int, samples: int, tv_samples: int) -> dict:
    """Metric table for ``net`` on ``corpus``; see ``cmd_eval``."""
    spec, sched, V = cfg.synth, cfg.schedule, cfg.state_space.vocab
    score_fn = net.score
    held = make_heldout(corpus, sched, V, seed=seed)
    out = {"records": len(corpus)}
    dse = model_dse(score_fn, held, sched, V)
    ora = model_dse(oracle_score_fn(spec), held, sched, V)
    out.update(dse=dse, oracle_dse=ora, dse_ratio=dse / ora)
    ln2 = make_heldout(corpus, sched, V, seed=seed + 1, sigma_bar=math.log(2))
    acc, per = argmax_accuracy(score_fn, ln2, sched, V)
    out["accuracy_ln2"] = acc
    for r, a in enumerate(per):
        out[f"accuracy_ln2_level{r}"] = a
    out["bayes_rate_ln2"] = bayes_rate(spec, ln2)
    n = min(samples, len(corpus))
    sub = corpus.take(np.arange(n))
    shape = (n, cfg.state_space.levels, cfg.state_space.frames)
    grids = sample(net, sub.bundle(), cfg.guidance, sched, shape, [seed, 2], V)
    out["lip_agreement"] = lip_agreement(spec, grids, sub.phonemes, sub.speaker)
    out["emotion_agreement"] = emotion_agreement(spec, grids, sub.emotion)
    tv = float("nan")
    # plug-in TV is dominated by sampling noise unless samples outnumber states
    if V ** (cfg.state_space.levels * cfg.state_space.frames) * 20 <= tv_samples:
        p = enumerate_distribution(spec)
        g = sample(net, None, cfg.guidance, sched, (tv_samples,) + shape[1:], [seed, 3], V)
        tv = total_variation(p, np.bincount(grid_index(g, V), minlength=len(p)) / tv_samples)
    out["tv_unconditional"] = tv
    return out


def cmd_eval(args) -> int:
    cfg = _apply_guidance_flags(args, ExperimentConfig.load(args.config))
    net, cfg = _load_model(args, cfg)
    try:
        corpus = load_corpus(args.corpus, cfg.synth)
    except (OSError, ValueError, KeyError) as exc:
        raise Fault(f"cannot read corpus: {exc}") from exc
    seed = 0 if args.seed is None else args.seed
    metrics = evaluate(net, cfg, corpus, seed, args.samples, args.tv_samples)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, f"{v:.10g}" if isinstance(v, float) else v])
    for k, v in metrics.items():
        print(f"{k:>24} {v:.6g}" if isinstance(v, float) else f"{k:>24} {v}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    cfg = ExperimentConfig.load(args.config)
    only = None if not args.only else [s.strip() for s in args.only.split(",") if s.strip()]
    try:
        results = verify.run(cfg.synth, cfg.network, cfg.schedule, only=only, seed=args.seed or 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    failed = [c for c in results if not c.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config (sections: state_space, schedule, network, "
                                        "train, guidance, synth)")
        p.add_argument("--threads", type=_threads, default=None,
                       help="BLAS thread cap (default: $HCDT_THREADS or 1)")
        p.add_argument("--seed", type=int, default=None)

    def guidance_flags(p):
        p.add_argument("--steps", type=_positive_int, default=None, help="Euler steps (default 64)")
        for name in ("all", "id", "emo", "lip"):
            p.add_argument(f"--w-{name}", dest=f"w_{name}", type=float, default=None,
                           help=f"guidance weight w_{name}")

    p = sub.add_parser("gen-data", help="draw a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of utterances (>= 1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a score network")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-iteration CSV (default: <out>.csv)")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=_positive_int)
    p.add_argument("--flat-ablation", action="store_true", help="single block stack over all levels")
    p.add_argument("--single-scale-adaln", action="store_true",
                   help="pooled-emotion modulation without temporal scales")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="guided Euler sampling for each condition record")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true", help="use exact synthetic scores instead of a checkpoint")
    p.add_argument("--conditions", required=True, help="JSON-lines condition records (null = NULL)")
    p.add_argument("--out", required=True)
    guidance_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="held-out metrics to CSV")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=_positive_int, default=256, help="guided samples for agreement rates")
    p.add_argument("--tv-samples", type=_positive_int, default=50_000)
    guidance_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the invariant battery")
    common(p)
    p.add_argument("--only", help="comma-separated suites: marginals, diffusion, loss, dropout, routing, "
                                  "guidance, gradients, oracle")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = _threads(args.threads)
        with _thread_limit(threads):
            return args.func(args)
    except (argparse.ArgumentTypeError, ConfigError) as exc:
        parser.error(str(exc))
    except Fault as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # any other runtime fault maps to exit code 2
        log.debug("fault", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
