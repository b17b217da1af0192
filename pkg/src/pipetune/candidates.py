"""Raw candidate generation: one batch per cached prefix plus one for the
empty prefix, each batch copying its prefix verbatim and filling the
remaining coordinates uniformly within bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cache import PrefixEntry, PrefixPool
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class SearchSpace:
    """Stage-segmented box domain: per-stage dimension counts plus global
    lower/upper bounds, lower < upper elementwise."""

    stage_dims: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        if any(d < 1 for d in self.stage_dims):
            raise InvalidArgumentError("stage dims must be positive")
        d = sum(self.stage_dims)
        if lower.shape != (d,) or upper.shape != (d,):
            raise InvalidArgumentError(f"bounds must have shape ({d},)")
        if not np.all(lower < upper):
            raise InvalidArgumentError("require lower < upper elementwise")

    @property
    def dim(self) -> int:
        return int(sum(self.stage_dims))

    @property
    def n_stages(self) -> int:
        return len(self.stage_dims)

    def stage_slice(self, stage_index: int) -> slice:
        """Column slice of stage ``stage_index`` (1-based) in the x vector."""
        if not 1 <= stage_index <= self.n_stages:
            raise InvalidArgumentError(f"stage index {stage_index} out of range")
        start = int(sum(self.stage_dims[: stage_index - 1]))
        return slice(start, start + self.stage_dims[stage_index - 1])

    def prefix_width(self, delta: int) -> int:
        if not 0 <= delta <= self.n_stages:
            raise InvalidArgumentError(f"delta {delta} out of range")
        return int(sum(self.stage_dims[:delta]))

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Min-max map into the unit cube using the space bounds (not data
        bounds), so GP lengthscales are comparable across dimensions."""
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def uniform(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """count x d matrix of uniform draws within bounds."""
        if count < 0:
            raise InvalidArgumentError("count must be nonnegative")
        u = rng.random((count, self.dim))
        return self.lower + u * (self.upper - self.lower)


@dataclass(frozen=True)
class Candidate:
    """A raw candidate point with the prefix it can reuse (delta = 0 means
    nothing memoized; x[:prefix width] matches the source prefix exactly)."""

    x: np.ndarray
    delta: int = 0
    source_prefix: Optional[PrefixEntry] = field(default=None, compare=False)


def generate(
    pool: PrefixPool, space: SearchSpace, m: int, rng: np.random.Generator
) -> list[Candidate]:
    """M raw candidates split evenly across prefix groups.

    Groups are the empty prefix plus every cached prefix entry; each gets
    b_size = floor(M / N) candidates and the remainder goes to the empty
    group. Prefix coordinates are copied verbatim so later lookups hit.
    """
    entries = pool.distinct_entries()
    n_groups = 1 + len(entries)
    if m < n_groups:
        raise InvalidArgumentError(
            f"M={m} smaller than the {n_groups} prefix groups"
        )
    b_size = m // n_groups
    remainder = m - b_size * n_groups

    candidates: list[Candidate] = []
    for group_index in range(n_groups):
        count = b_size + (remainder if group_index == 0 else 0)
        draw = space.uniform(rng, count)
        if group_index == 0:
            entry = None
            delta = 0
        else:
            entry = entries[group_index - 1]
            delta = entry.delta
            width = len(entry.values)
            draw[:, :width] = np.asarray(entry.values, dtype=float)
        for row in draw:
            candidates.append(Candidate(x=row, delta=delta, source_prefix=entry))
    return candidates
