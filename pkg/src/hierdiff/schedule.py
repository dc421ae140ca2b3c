"""Noise schedules: rate sigma(t) and cumulative noise sigma_bar(t)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KINDS = ("log_linear", "linear_sigma")


@dataclass(frozen=True)
class NoiseSchedule:
    """Masking schedule on ``[0, horizon]``.

    ``log_linear`` makes the expected masked fraction ``1 - exp(-sigma_bar(t))``
    exactly linear in ``t``, reaching ``1 - eps`` at the horizon.  ``linear_sigma``
    interpolates the rate itself from ``sigma_min`` to ``sigma_max``.
    """

    kind: str = "log_linear"
    sigma_min: float = 1e-4
    sigma_max: float = 20.0
    horizon: float = 1.0
    eps: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; choose from {KINDS}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.kind == "log_linear" and not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.kind == "linear_sigma" and (self.sigma_min < 0 or self.sigma_max <= 0):
            raise ValueError("linear_sigma needs sigma_min >= 0 and sigma_max > 0")

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.horizon * (1 + 1e-12)):
            raise ValueError(f"t must lie in [0, {self.horizon}], got {t}")
        return t

    def sigma_bar(self, t):
        t = self._check(t)
        u = t / self.horizon
        if self.kind == "log_linear":
            return -np.log1p(-u * (1.0 - self.eps))
        return self.sigma_min * t + 0.5 * (self.sigma_max - self.sigma_min) * t * u

    def sigma(self, t):
        """Instantaneous rate, the analytic derivative of ``sigma_bar``."""
        t = self._check(t)
        u = t / self.horizon
        if self.kind == "log_linear":
            return (1.0 - self.eps) / self.horizon / (1.0 - u * (1.0 - self.eps))
        return self.sigma_min + (self.sigma_max - self.sigma_min) * u

    def mask_probability(self, t):
        return mask_probability_from_sigma_bar(self.sigma_bar(t))

    def time_for_sigma_bar(self, sigma_bar):
        """Inverse of ``sigma_bar``; raises if the level is unreachable before the horizon."""
        sb = np.asarray(sigma_bar, dtype=np.float64)
        if self.kind == "log_linear":
            t = self.horizon * -np.expm1(-sb) / (1.0 - self.eps)
        else:
            a = 0.5 * (self.sigma_max - self.sigma_min) / self.horizon
            b = self.sigma_min
            if a == 0:
                t = sb / b
            else:
                t = (-b + np.sqrt(b * b + 4 * a * sb)) / (2 * a)
        if np.any(t > self.horizon * (1 + 1e-12)) or np.any(sb < 0):
            raise ValueError(f"sigma_bar={sigma_bar} not reached on [0, {self.horizon}]")
        return np.minimum(t, self.horizon)

    def to_dict(self) -> dict:
        return asdict(self)


def mask_probability_from_sigma_bar(sigma_bar):
    return -np.expm1(-np.asarray(sigma_bar, dtype=np.float64))


def score_prefactor(sigma_bar):
    """``exp(-sb) / (1 - exp(-sb))``: the concrete score of the clean token given x0."""
    sigma_bar = np.asarray(sigma_bar, dtype=np.float64)
    return 1.0 / np.expm1(sigma_bar)
