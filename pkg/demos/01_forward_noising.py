"""Forward noising: watch a token grid fade into MASK as time runs from 0 to T.

The log-linear schedule makes the expected masked fraction exactly linear in t,
so the printed empirical fractions should track t/T closely.
"""

import numpy as np

from hierdiff.diffusion import forward_sample
from hierdiff.schedule import NoiseSchedule
from hierdiff.synthdata import SynthSpec, generate

spec = SynthSpec()
sched = NoiseSchedule()
grid = generate(spec, 1, seed=0).grids

print("clean grid (levels x frames):")
print(grid[0])
for frac in (0.1, 0.5, 0.9):
    t = frac * sched.horizon
    noisy = forward_sample(grid, sched, t, 1, spec.vocab)
    shown = np.where(noisy[0] == spec.vocab, -1, noisy[0])
    print(f"\nt = {frac:.1f} T  (sigma_bar = {float(sched.sigma_bar(t)):.3f}); MASK shown as -1")
    print(shown)

print("\nempirical mask fraction over 100k tokens vs 1 - exp(-sigma_bar):")
many = np.zeros((12_500, 1, 8), dtype=np.int64)
for frac in np.linspace(0.1, 1.0, 4):
    t = frac * sched.horizon
    emp = (forward_sample(many, sched, t, 2, 2) == 2).mean()
    print(f"  t/T={frac:.1f}  empirical {emp:.4f}  exact {float(sched.mask_probability(t)):.4f}")
