"""Where each condition can reach.

Emotion enters only the high-level tier, so changing it leaves the low-level
hidden state and low-level scores bitwise identical.  Identity enters the low
tier and, through the projection of h_low, the high tier as well.
"""

import dataclasses

import numpy as np

from hierdiff.diffusion import forward_sample
from hierdiff.network import NetworkConfig, ScoreNetwork
from hierdiff.schedule import NoiseSchedule
from hierdiff.synthdata import SynthSpec, generate
from hierdiff.verify import randomize_parameters

spec, sched = SynthSpec(), NoiseSchedule()
net = ScoreNetwork(NetworkConfig())
randomize_parameters(net, seed=0, scale=0.1)  # a fresh net has zero modulation; wake it up
c = generate(spec, 2, seed=0)
grid = forward_sample(c.grids, sched, 0.5, 0, spec.vocab)
base = c.bundle()
sb = np.array([0.5, 1.5])

logits, hid = net.forward(grid, sb, base)
for label, bundle in (("emotion", dataclasses.replace(base, emo=(c.emotion + 3) % spec.emotions)),
                      ("identity", dataclasses.replace(base, id=-c.identity))):
    l2, h2 = net.forward(grid, sb, bundle)
    d_low = np.abs(h2.h_low.data - hid.h_low.data).max()
    d_high = np.abs(h2.h_high.data - hid.h_high.data).max()
    print(f"changing {label:8s}: max |dh_low| = {d_low:.3g}   max |dh_high| = {d_high:.3g}")

g = hid.gamma_t_frames[0].data[0]
print("temporal scale of channel 0 across the 8 frames (blocks of 4):", np.round(g[0], 3))
