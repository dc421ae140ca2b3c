"""Train a desk-size network for a few minutes and compare it with the oracle.

The ratio printed is the network's held-out score-entropy loss over the loss of
exact scores on the same corrupted batch; 1.0 is the floor.  A full acceptance
run trains for 12k iterations; this demo stops much earlier.
"""

import sys
import time

from hierdiff.evaluation import make_heldout, model_dse, oracle_score_fn
from hierdiff.network import NetworkConfig, ScoreNetwork
from hierdiff.schedule import NoiseSchedule
from hierdiff.synthdata import SynthSpec, generate
from hierdiff.training import TrainConfig, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
spec, sched = SynthSpec(), NoiseSchedule()
train = generate(spec, 5000, seed=1)
held = make_heldout(generate(spec, 256, seed=2), sched, spec.vocab, seed=3)
oracle = model_dse(oracle_score_fn(spec), held, sched, spec.vocab)
print(f"oracle held-out loss {oracle:.3f}")

net = ScoreNetwork(NetworkConfig())
t0 = time.time()


def progress(row):
    if row["iter"] % 250 == 0:
        ratio = model_dse(net.score, held, sched, spec.vocab) / oracle
        print(f"iter {row['iter']:5d}  train loss {row['dse_loss']:7.3f}  held-out/oracle {ratio:.3f}"
              f"  ({time.time() - t0:.0f}s)")


train_loop(TrainConfig(lr=3e-4, batch=32, iters=iters), train, net, sched, callback=progress)
final = model_dse(net.score, held, sched, spec.vocab) / oracle
print(f"{net.num_parameters()} parameters, final held-out/oracle ratio {final:.3f}")
