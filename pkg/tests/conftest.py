import itertools

import numpy as np
import pytest
from hypothesis import settings

from hierdiff.schedule import NoiseSchedule, score_prefactor

settings.register_profile("repo", max_examples=60, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def sched():
    return NoiseSchedule()


class TableOracle:
    """Exact concrete scores for an explicit distribution over small grids.

    ``probs[i]`` is the probability of the grid whose row-major base-``V``
    digits are ``i``.  Independent of the synthetic generator on purpose.
    """

    def __init__(self, probs, shape, vocab):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.shape, self.V = tuple(shape), vocab
        self.grids = np.array(list(itertools.product(range(vocab), repeat=int(np.prod(shape))))).reshape((-1,) + self.shape)

    def posterior(self, grid_t):
        grid_t = np.asarray(grid_t)
        uniq, inv = np.unique(grid_t.reshape(len(grid_t), -1), axis=0, return_inverse=True)
        return self._posterior(uniq.reshape((-1,) + self.shape))[inv.ravel()]

    def _posterior(self, grid_t):
        out = np.zeros(grid_t.shape + (self.V,))
        for b, g in enumerate(grid_t):
            seen = g != self.V
            ok = np.all((self.grids == g) | ~seen, axis=(1, 2))
            w = self.probs * ok
            for pos in zip(*np.nonzero(~seen)):
                vals = self.grids[(slice(None),) + pos]
                col = np.bincount(vals, weights=w, minlength=self.V)
                out[(b,) + pos] = col / col.sum()
        return out

    def score(self, grid_t, sigma_bar, bundle=None):
        sb = np.broadcast_to(np.asarray(sigma_bar, dtype=np.float64), (len(grid_t),))
        return score_prefactor(sb).reshape(-1, 1, 1, 1) * self.posterior(grid_t)

    def log_score(self, grid_t, sigma_bar, bundle=None):
        with np.errstate(divide="ignore"):
            return np.log(self.score(grid_t, sigma_bar, bundle))


# one line per acceptance criterion, printed after the run even when output is captured
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
