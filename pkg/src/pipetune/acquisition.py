"""Candidate scoring: expected improvement, Monte-Carlo expected inverse
cost with memoization gating, cost-cooling, and the combined scores used
by each tuning method.

All functions here are pure; the optimizer loop owns every piece of
state (budget, cooling factor, models).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgumentError, NumericalFailureError
from .gp import PosteriorGaussian

ETA_SCHEDULES = ("budget", "constant", "exp_decay")

EXP_DECAY_FACTOR = 0.9

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class BudgetState:
    """Total and consumed budget in cost units, plus the current cooling
    factor eta (updated by the caller's schedule each iteration)."""

    total_budget: float
    consumed: float = 0.0
    eta: float = 1.0

    def __post_init__(self):
        if not self.total_budget > 0.0:
            raise InvalidArgumentError("total_budget must be positive")
        if self.consumed < 0.0:
            raise InvalidArgumentError("consumed must be nonnegative")

    @property
    def remaining_fraction(self) -> float:
        """Remaining budget as a fraction of total, clamped at 0 on overshoot."""
        return max(0.0, (self.total_budget - self.consumed) / self.total_budget)


@dataclass(frozen=True)
class CostEstimate:
    """Per-stage cost draws for one candidate: a K x D matrix whose first
    ``delta`` rows are filled with the memoization constant ``epsilon``."""

    per_stage_samples: np.ndarray
    delta: int
    epsilon: float

    def __post_init__(self):
        samples = np.asarray(self.per_stage_samples, dtype=float)
        object.__setattr__(self, "per_stage_samples", samples)
        if samples.ndim != 2:
            raise InvalidArgumentError("per_stage_samples must be a K x D matrix")
        if not 0 <= self.delta <= samples.shape[0]:
            raise InvalidArgumentError(f"delta {self.delta} outside [0, K]")
        if not self.epsilon > 0.0:
            raise InvalidArgumentError("epsilon must be positive")
        if not np.all(samples > 0.0):
            raise InvalidArgumentError("cost samples must be strictly positive")
        if self.delta and not np.all(samples[: self.delta] == self.epsilon):
            raise InvalidArgumentError("memoized rows must equal epsilon")

    @classmethod
    def from_suffix_draws(
        cls, suffix_draws: np.ndarray, delta: int, epsilon: float, n_stages: int
    ) -> "CostEstimate":
        """Assemble the full matrix from draws for the non-memoized stages
        (shape (K - delta) x D), filling the first delta rows with epsilon."""
        suffix_draws = np.atleast_2d(np.asarray(suffix_draws, dtype=float))
        if suffix_draws.shape[0] != n_stages - delta:
            raise InvalidArgumentError(
                f"expected {n_stages - delta} suffix rows, got {suffix_draws.shape[0]}"
            )
        full = np.vstack(
            [np.full((delta, suffix_draws.shape[1]), epsilon), suffix_draws]
        )
        return cls(per_stage_samples=full, delta=delta, epsilon=epsilon)


@dataclass(frozen=True)
class AcquisitionScore:
    ei: float
    inverse_cost: float
    combined: float


def expected_improvement(post: PosteriorGaussian, f_best: float) -> float:
    """Closed-form EI of a Gaussian belief over a maximization target.

    Returns ``sigma * (z * Phi(z) + phi(z))`` with ``z = (mu - f_best) / sigma``;
    degenerates to ``max(0, mu - f_best)`` when sigma is zero.
    """
    sigma = math.sqrt(post.variance)
    if sigma == 0.0:
        return max(0.0, post.mean - f_best)
    z = (post.mean - f_best) / sigma
    phi = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
    big_phi = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    return sigma * (z * big_phi + phi)


def expected_improvement_batch(
    mean: np.ndarray, variance: np.ndarray, f_best: float
) -> np.ndarray:
    """Vectorized EI over arrays of posterior means/variances."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.asarray(variance, dtype=float))
    out = np.maximum(mean - f_best, 0.0)
    pos = sigma > 0.0
    if np.any(pos):
        z = (mean[pos] - f_best) / sigma[pos]
        phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        out[pos] = sigma[pos] * (z * ndtr(z) + phi)
    return out


def expected_inverse_cost(est: CostEstimate) -> float:
    """Monte-Carlo estimate of E[1 / C] where each sampled total cost is
    the column sum of the per-stage draw matrix (memoized rows already
    hold epsilon)."""
    totals = np.sum(est.per_stage_samples, axis=0)
    if not np.all(totals > 0.0):
        raise NumericalFailureError("nonpositive sampled total cost")
    return float(np.mean(1.0 / totals))


def inverse_cost_from_totals(totals: np.ndarray) -> float:
    """E[1 / C] from pre-summed total-cost draws (single-GP baselines)."""
    totals = np.asarray(totals, dtype=float)
    if not np.all(totals > 0.0):
        raise NumericalFailureError("nonpositive sampled total cost")
    return float(np.mean(1.0 / totals))


def cooling_eta(budget: BudgetState, schedule: str) -> float:
    """Next cooling factor under the given schedule.

    ``budget``   : remaining / total, clamped at 0 on overshoot.
    ``constant`` : always 1.
    ``exp_decay``: 0.9 times the previous value (carried in ``budget.eta``).
    """
    if schedule == "budget":
        return budget.remaining_fraction
    if schedule == "constant":
        return 1.0
    if schedule == "exp_decay":
        return EXP_DECAY_FACTOR * budget.eta
    raise InvalidArgumentError(f"unknown eta schedule: {schedule!r}")


def _cooled(inv_cost: float, eta: float) -> float:
    # IEEE pow is exact at the endpoints: pow(x, 0) == 1 and pow(x, 1) == x,
    # so eta=0 reduces to plain EI and eta=1 to the uncooled score bit-exactly
    return math.pow(inv_cost, eta)


def eeipu_score(ei: float, inv_cost: float, eta: float) -> float:
    """EI scaled by the cooled expected inverse total cost."""
    if ei < 0.0 or inv_cost <= 0.0 or not 0.0 <= eta <= 1.0:
        raise InvalidArgumentError("require ei >= 0, inv_cost > 0, eta in [0, 1]")
    return ei * _cooled(inv_cost, eta)


def eips_score(ei: float, total_cost_inv: float) -> float:
    """EI times E[1/C] from a single total-cost model; no cooling, no
    memoization gating."""
    if ei < 0.0 or total_cost_inv <= 0.0:
        raise InvalidArgumentError("require ei >= 0, total_cost_inv > 0")
    return ei * total_cost_inv


def carbo_score(ei: float, total_cost_inv: float, eta: float) -> float:
    """Cooled variant of the single-cost-model score."""
    if ei < 0.0 or total_cost_inv <= 0.0 or not 0.0 <= eta <= 1.0:
        raise InvalidArgumentError("require ei >= 0, total_cost_inv > 0, eta in [0, 1]")
    return ei * _cooled(total_cost_inv, eta)
