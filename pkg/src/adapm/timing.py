"""Learned action timing.

Each worker's number of clock advances per communication round is modelled as
Poisson. The rate is tracked with exponential smoothing and an intent is acted
on once its start clock falls below a high quantile of the clocks expected over
the next two rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

from .core import ValidationError

DEFAULT_ALPHA = 0.1
DEFAULT_QUANTILE = 0.9999
DEFAULT_INITIAL_RATE = 10.0

# Beyond this rate the CDF summation gets expensive; callers act unconditionally.
RATE_CAP = 1e6


def poisson_quantile(lam: float, p: float) -> int:
    """Smallest integer ``k`` with ``P[Poisson(lam) <= k] >= p``.

    The CDF is accumulated term by term with the pmf evaluated in log space, so
    ``exp(-lam)`` never underflows the running sum for large rates.
    """
    if not lam > 0 or math.isinf(lam):
        raise ValidationError(f"rate must be positive and finite, got {lam}")
    if not 0.0 < p < 1.0:
        raise ValidationError(f"quantile must be in (0, 1), got {p}")

    log_lam = math.log(lam)
    # Lower tail below lam - 40 sigma carries < 1e-300 probability mass.
    k = 0
    if lam > 1000.0:
        k = max(0, int(lam - 40.0 * math.sqrt(lam)))
    log_pmf = -lam + k * log_lam - math.lgamma(k + 1)
    cdf = 0.0
    comp = 0.0  # Kahan compensation
    while True:
        term = math.exp(log_pmf)
        y = term - comp
        t = cdf + y
        comp = (t - cdf) - y
        cdf = t
        if cdf >= p:
            return k
        k += 1
        log_pmf += log_lam - math.log(k)
        if k > lam + 100.0 * math.sqrt(lam) + 1000:
            # numerically saturated below p; the mass left is negligible
            return k


@lru_cache(maxsize=4096)
def _cached_quantile(lam_rounded: float, p: float) -> int:
    return poisson_quantile(lam_rounded, p)


def quantile_lookup(lam: float, p: float) -> int:
    """Memoized quantile, keyed on ``lam`` rounded to 1e-6."""
    return _cached_quantile(round(lam, 6), p)


@dataclass
class TimingConfig:
    alpha: float = DEFAULT_ALPHA
    quantile: float = DEFAULT_QUANTILE
    initial_rate: float = DEFAULT_INITIAL_RATE
    # act on every intent as soon as it is signaled (ablation)
    immediate: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("timing.alpha must be in (0, 1]")
        if not 0.0 < self.quantile < 1.0:
            raise ValidationError("timing.quantile must be in (0, 1)")
        if not self.initial_rate > 0:
            raise ValidationError("timing.initial_rate must be positive")


@dataclass
class RateEstimator:
    """Smoothed clocks-per-round estimate for one worker."""

    alpha: float = DEFAULT_ALPHA
    p: float = DEFAULT_QUANTILE
    lambda_hat: float = DEFAULT_INITIAL_RATE
    last_clock: int = 0
    last_delta: int = 0
    history: list = field(default_factory=list, repr=False)
    keep_history: bool = False

    @classmethod
    def from_config(cls, cfg: TimingConfig, start_clock: int = 0,
                    keep_history: bool = False) -> "RateEstimator":
        return cls(alpha=cfg.alpha, p=cfg.quantile,
                   lambda_hat=cfg.initial_rate, last_clock=start_clock,
                   keep_history=keep_history)

    def update(self, c_now: int) -> int:
        """Fold in the clocks observed since the previous round.

        Returns the act-now threshold: an intent is acted on this round iff
        its start clock is strictly below the returned value. ``None`` is
        never returned; above the rate cap the threshold is unbounded.
        """
        if c_now < self.last_clock:
            raise ValidationError("worker clock moved backwards")
        delta = c_now - self.last_clock
        if delta > 0:
            self.lambda_hat = (1.0 - self.alpha) * self.lambda_hat + self.alpha * delta
        self.last_clock = c_now
        self.last_delta = delta
        if self.keep_history:
            self.history.append(self.lambda_hat)
        return self.threshold(c_now)

    def threshold(self, c_now: int):
        lam = 2.0 * max(self.lambda_hat, self.last_delta)
        if lam > RATE_CAP:
            return math.inf
        return c_now + quantile_lookup(lam, self.p)


def update_and_decide(est: RateEstimator, c_now: int, c_start_of_intent: int) -> bool:
    """One estimator step followed by the act-now predicate for a single intent."""
    return c_start_of_intent < est.update(c_now)
