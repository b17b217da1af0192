"""Budget-constrained tuning loop: seeded warmup, per-iteration GP fits
(objective plus cost models), prefix-aware candidate generation, method
specific scoring with memoization gating, and trace persistence.

Methods: ``eeipu`` (per-stage cost models, memoization aware, cooled),
``ei`` (cost-blind), ``eips`` (single total-cost model), ``carbo``
(single total-cost model, cooled).

Every random draw is derived from (seed, purpose tag, iteration, ...)
via SeedSequence, so warmup points and candidate batches are identical
across methods for the same seed, and reruns are bit-reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import gp
from .acquisition import BudgetState, cooling_eta, expected_improvement_batch
from .cache import PrefixPool, StageOutputStore, empty_pool, update_pool
from .candidates import Candidate, SearchSpace, generate
from .errors import (
    InsufficientDataError,
    InvalidArgumentError,
    NumericalFailureError,
    TraceParseError,
)
from .pipeline import Observation, PipelineSpec, output_handles
from .pipeline import run as run_pipeline

logger = logging.getLogger("pipetune.optimizer")

METHODS = ("eeipu", "ei", "eips", "carbo")

# purpose tags for seed derivation (entropy = [seed, tag, ...])
_TAG_WARMUP = 101
_TAG_FIT = 102
_TAG_CAND = 103
_TAG_MC = 104
_TAG_TIE = 105

# model index used in fit-seed derivation for the objective model; cost
# models use 0-based stage indices so a 1-stage pipeline's cost model and
# a single total-cost model derive identical seeds
_OBJECTIVE_MODEL_INDEX = 10_000

_FLOAT_FMT = "{:.17g}"


def derived_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, ...) combination."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def derived_int(seed: int, *tags: int) -> int:
    """Stable 32-bit integer seed for APIs that take a plain int."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


@dataclass
class RunConfig:
    """Resolved knobs for one tuning run."""

    method: str = "eeipu"
    n0: int = 10
    m: int = 512
    n_mc: int = 1000
    restarts: int = 10
    q: int = 5
    epsilon: float = 0.01
    eta_schedule: str = "budget"
    prefix_policy: str = "all"
    total_budget: float | str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method: {self.method!r}")
        if self.n0 < 2:
            raise InvalidArgumentError("n0 must be >= 2")
        if self.m < 1 or self.n_mc < 1 or self.restarts < 1:
            raise InvalidArgumentError("m, n_mc, and restarts must be >= 1")
        if self.q < 0:
            raise InvalidArgumentError("q must be >= 0")
        if not self.epsilon > 0.0:
            raise InvalidArgumentError("epsilon must be positive")
        if self.eta_schedule not in ("budget", "constant", "exp_decay"):
            raise InvalidArgumentError(f"unknown eta schedule: {self.eta_schedule!r}")
        if self.prefix_policy not in ("all", "first", "mean"):
            raise InvalidArgumentError(f"unknown prefix policy: {self.prefix_policy!r}")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be nonnegative")
        if self.total_budget != "auto" and not float(self.total_budget) > 0.0:
            raise InvalidArgumentError("total_budget must be positive or 'auto'")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n0": self.n0,
            "m": self.m,
            "n_mc": self.n_mc,
            "restarts": self.restarts,
            "q": self.q,
            "epsilon": self.epsilon,
            "eta_schedule": self.eta_schedule,
            "prefix_policy": self.prefix_policy,
            "total_budget": self.total_budget,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class TraceRow:
    """One evaluated configuration; warmup rows carry eta=1 and score=0."""

    iteration: int
    delta: int
    eta: float
    consumed: float
    y: float
    best_y: float
    score: float
    stage_costs: tuple[float, ...]
    x: tuple[float, ...]


@dataclass
class RunTrace:
    pipeline_name: str
    config: dict
    total_budget: float
    rows: list[TraceRow] = field(default_factory=list)

    @property
    def best_y(self) -> float:
        return self.rows[-1].best_y if self.rows else float("-inf")

    @property
    def consumed(self) -> float:
        return self.rows[-1].consumed if self.rows else 0.0

    def post_warmup_rows(self) -> list[TraceRow]:
        n0 = int(self.config.get("n0", 0))
        return [r for r in self.rows if r.iteration > n0]


@dataclass(frozen=True)
class ModelSet:
    """Fitted surrogates for one iteration: the objective model plus cost
    models (one per stage for eeipu, a single total-cost model for
    eips/carbo, none for ei)."""

    objective: gp.GPModel
    costs: tuple[gp.GPModel, ...] = ()


@dataclass
class OptState:
    """Mutable loop state owned by run()/step()."""

    config: RunConfig
    pipeline: PipelineSpec
    space: SearchSpace
    store: StageOutputStore
    pool: PrefixPool
    observations: list[Observation]
    consumed: float
    total_budget: float
    eta: float
    rows: list[TraceRow]
    models: Optional[ModelSet] = None

    @property
    def f_best(self) -> float:
        return max(o.y for o in self.observations)


# ---------------------------------------------------------------------------
# scoring

def score_candidates(
    method: str,
    models: ModelSet,
    space: SearchSpace,
    xs: np.ndarray,
    deltas: np.ndarray,
    f_best: float,
    eta: float,
    epsilon: float,
    n_mc: int,
    mc_rngs: Sequence[np.random.Generator],
) -> np.ndarray:
    """Acquisition scores for a batch of raw candidates.

    For cost-aware methods, per-candidate total-cost draws come from the
    log-cost models (exponentiated Gaussians); candidates with a memoized
    prefix of length delta have their first delta stage draws replaced by
    epsilon before totals are formed.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    xn = space.normalize(xs)
    mean, var = gp.posterior_mean_var(models.objective, xn)
    ei = expected_improvement_batch(mean, var, f_best)
    if method == "ei":
        return ei

    n = xs.shape[0]
    if method == "eeipu":
        totals = np.zeros((n, n_mc))
        for k in range(1, space.n_stages + 1):
            mu, v = gp.posterior_mean_var(
                models.costs[k - 1], xn[:, space.stage_slice(k)]
            )
            sd = np.sqrt(v)
            z = mc_rngs[k - 1].standard_normal((n, n_mc))
            draws = np.exp(mu[:, None] + sd[:, None] * z)
            memoized = np.asarray(deltas) >= k
            if np.any(memoized):
                draws[memoized, :] = epsilon
            totals += draws
        inverse = np.mean(1.0 / totals, axis=1)
        return ei * np.power(inverse, eta)

    # single total-cost model (eips, carbo)
    mu, v = gp.posterior_mean_var(models.costs[0], xn)
    z = mc_rngs[0].standard_normal((n, n_mc))
    totals = np.exp(mu[:, None] + np.sqrt(v)[:, None] * z)
    inverse = np.mean(1.0 / totals, axis=1)
    if method == "eips":
        return ei * inverse
    return ei * np.power(inverse, eta)


def _fit_models(state: OptState, iteration: int) -> ModelSet:
    cfg = state.config
    obs = state.observations
    xn = state.space.normalize(np.stack([o.x for o in obs]))
    y = np.array([o.y for o in obs])

    objective = gp.fit(
        zip(xn, y), derived_int(cfg.seed, _TAG_FIT, iteration, _OBJECTIVE_MODEL_INDEX)
    )
    if cfg.method == "ei":
        return ModelSet(objective=objective)

    if cfg.method == "eeipu":
        costs = []
        for k in range(1, state.space.n_stages + 1):
            sl = state.space.stage_slice(k)
            rows = [i for i, o in enumerate(obs) if o.memo_delta < k]
            pairs = [(xn[i, sl], math.log(obs[i].stage_costs[k - 1])) for i in rows]
            costs.append(
                gp.fit(pairs, derived_int(cfg.seed, _TAG_FIT, iteration, k - 1))
            )
        return ModelSet(objective=objective, costs=tuple(costs))

    # total-cost model on fully executed observations only
    rows = [i for i, o in enumerate(obs) if o.memo_delta == 0]
    pairs = [(xn[i], math.log(obs[i].executed_cost)) for i in rows]
    total_cost = gp.fit(pairs, derived_int(cfg.seed, _TAG_FIT, iteration, 0))
    return ModelSet(objective=objective, costs=(total_cost,))


def _n_cost_models(method: str, n_stages: int) -> int:
    if method == "ei":
        return 0
    return n_stages if method == "eeipu" else 1


# ---------------------------------------------------------------------------
# loop

def init_state(
    config: RunConfig,
    pipeline: PipelineSpec,
    cache_root: Optional[str | Path] = None,
) -> OptState:
    """Run the warmup phase and return loop state ready for step().

    Warmup points come from a scrambled low-discrepancy sequence seeded
    only by (seed, warmup tag), so every method sees the same start.
    """
    space = pipeline.search_space()
    store = StageOutputStore(
        cache_root if cache_root is not None else tempfile.mkdtemp(prefix="pipetune_cache_")
    )
    capacity = config.q if config.method == "eeipu" else 0
    pool = empty_pool(space.stage_dims, capacity)

    halton = qmc.Halton(
        d=space.dim, scramble=True, seed=derived_int(config.seed, _TAG_WARMUP)
    )
    points = space.lower + halton.random(config.n0) * (space.upper - space.lower)

    observations: list[Observation] = []
    rows: list[TraceRow] = []
    consumed = 0.0
    best = float("-inf")
    for i, x in enumerate(points, start=1):
        obs = run_pipeline(pipeline, x, pool, store)
        observations.append(obs)
        consumed += obs.executed_cost
        best = max(best, obs.y)
        pool = _maybe_update_pool(pool, config, pipeline, store, obs)
        rows.append(
            TraceRow(
                iteration=i,
                delta=obs.memo_delta,
                eta=1.0,
                consumed=consumed,
                y=obs.y,
                best_y=best,
                score=0.0,
                stage_costs=obs.stage_costs,
                x=tuple(float(v) for v in obs.x),
            )
        )

    if config.total_budget == "auto":
        total_budget = 5.0 * consumed
    else:
        total_budget = float(config.total_budget)
    if not total_budget > 0.0:
        raise InvalidArgumentError("resolved total_budget must be positive")

    return OptState(
        config=config,
        pipeline=pipeline,
        space=space,
        store=store,
        pool=pool,
        observations=observations,
        consumed=consumed,
        total_budget=total_budget,
        eta=1.0,
        rows=rows,
    )


def warmup(config: RunConfig, pipeline: PipelineSpec) -> list[Observation]:
    """The warmup evaluations alone (same points any method would see)."""
    return init_state(config, pipeline).observations


def _maybe_update_pool(
    pool: PrefixPool,
    config: RunConfig,
    pipeline: PipelineSpec,
    store: StageOutputStore,
    obs: Observation,
) -> PrefixPool:
    if pool.capacity == 0 or pipeline.n_stages < 2:
        return pool
    handles = output_handles(pipeline, store, obs.x)
    pool = update_pool(pool, obs, handles, config.prefix_policy)
    store.write_index(pool)
    return pool


def step(state: OptState) -> tuple[Candidate, Observation]:
    """One model-guided iteration: fit, generate, score, evaluate, update."""
    cfg = state.config
    iteration = len(state.observations) + 1

    state.eta = cooling_eta(
        BudgetState(
            total_budget=state.total_budget, consumed=state.consumed, eta=state.eta
        ),
        cfg.eta_schedule,
    )

    try:
        state.models = _fit_models(state, iteration)
    except (NumericalFailureError, InsufficientDataError) as exc:
        if state.models is None:
            raise
        logger.warning(
            "model fit failed at iteration %d (%s); reusing previous models",
            iteration,
            exc,
        )

    f_best = state.f_best
    n_cost = _n_cost_models(cfg.method, state.space.n_stages)
    all_candidates: list[Candidate] = []
    all_scores: list[np.ndarray] = []
    for restart in range(cfg.restarts):
        cands = generate(
            state.pool,
            state.space,
            cfg.m,
            derived_rng(cfg.seed, _TAG_CAND, iteration, restart),
        )
        xs = np.stack([c.x for c in cands])
        deltas = np.array([c.delta for c in cands])
        mc_rngs = [
            derived_rng(cfg.seed, _TAG_MC, iteration, idx, restart)
            for idx in range(n_cost)
        ]
        all_scores.append(
            score_candidates(
                cfg.method,
                state.models,
                state.space,
                xs,
                deltas,
                f_best,
                state.eta,
                cfg.epsilon,
                cfg.n_mc,
                mc_rngs,
            )
        )
        all_candidates.extend(cands)

    scores = np.concatenate(all_scores)
    if np.all(scores == 0.0):
        # nothing promising anywhere; explore uniformly at random
        chosen_idx = int(
            derived_rng(cfg.seed, _TAG_TIE, iteration).integers(len(all_candidates))
        )
    else:
        chosen_idx = int(np.argmax(scores))
    chosen = all_candidates[chosen_idx]

    obs = run_pipeline(state.pipeline, chosen.x, state.pool, state.store)
    state.observations.append(obs)
    state.consumed += obs.executed_cost
    state.pool = _maybe_update_pool(state.pool, cfg, state.pipeline, state.store, obs)
    state.rows.append(
        TraceRow(
            iteration=iteration,
            delta=obs.memo_delta,
            eta=state.eta,
            consumed=state.consumed,
            y=obs.y,
            best_y=max(state.rows[-1].best_y, obs.y),
            score=float(scores[chosen_idx]),
            stage_costs=obs.stage_costs,
            x=tuple(float(v) for v in obs.x),
        )
    )
    return chosen, obs


def run(
    config: RunConfig,
    pipeline: PipelineSpec,
    trace_path: Optional[str | Path] = None,
    cache_root: Optional[str | Path] = None,
) -> RunTrace:
    """Warmup then step until the budget is consumed; the iteration that
    crosses the budget completes and is recorded.

    On failure, rows gathered so far are flushed to trace_path before the
    error propagates.
    """
    state = init_state(config, pipeline, cache_root)
    trace = RunTrace(
        pipeline_name=pipeline.name,
        config=config.to_dict(),
        total_budget=state.total_budget,
        rows=state.rows,
    )
    try:
        while state.consumed < state.total_budget:
            step(state)
    except BaseException:
        if trace_path is not None:
            write_trace(trace, trace_path)
        raise
    if trace_path is not None:
        write_trace(trace, trace_path)
    return trace


# ---------------------------------------------------------------------------
# trace persistence

def trace_header(n_stages: int, dim: int) -> str:
    costs = ",".join(f"cost_s{k}" for k in range(1, n_stages + 1))
    xs = ",".join(f"x_{j}" for j in range(1, dim + 1))
    return f"iter,delta,eta,consumed,y,best_y,score,{costs},{xs}"


def write_trace(trace: RunTrace, path: str | Path) -> None:
    """CSV with a fixed header; floats at 17 significant digits so a rerun
    with the same seed is byte-identical. A JSON sidecar records the
    resolved config."""
    path = Path(path)
    if not trace.rows:
        raise InvalidArgumentError("cannot persist an empty trace")
    n_stages = len(trace.rows[0].stage_costs)
    dim = len(trace.rows[0].x)
    lines = [trace_header(n_stages, dim)]
    for r in trace.rows:
        floats = [r.eta, r.consumed, r.y, r.best_y, r.score, *r.stage_costs, *r.x]
        lines.append(
            f"{r.iteration},{r.delta}," + ",".join(_FLOAT_FMT.format(v) for v in floats)
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    sidecar = {
        "pipeline": trace.pipeline_name,
        "config": trace.config,
        "resolved_total_budget": trace.total_budget,
        "n_stages": n_stages,
        "dim": dim,
    }
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_trace(path: str | Path) -> RunTrace:
    """Parse a persisted trace (and its sidecar when present) back into a
    RunTrace; malformed content raises a parse error naming the file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceParseError(f"cannot read trace: {exc}", str(path))
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TraceParseError("empty trace file", str(path))

    header = lines[0].split(",")
    fixed = ["iter", "delta", "eta", "consumed", "y", "best_y", "score"]
    if header[: len(fixed)] != fixed:
        raise TraceParseError(f"unexpected header: {lines[0]!r}", str(path))
    n_stages = sum(1 for c in header if c.startswith("cost_s"))
    dim = sum(1 for c in header if c.startswith("x_"))
    if len(header) != len(fixed) + n_stages + dim or n_stages == 0 or dim == 0:
        raise TraceParseError(f"inconsistent header: {lines[0]!r}", str(path))

    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise TraceParseError(f"row has {len(parts)} fields: {ln!r}", str(path))
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise TraceParseError(f"non-numeric field in row: {ln!r}", str(path))
        rows.append(
            TraceRow(
                iteration=int(vals[0]),
                delta=int(vals[1]),
                eta=vals[2],
                consumed=vals[3],
                y=vals[4],
                best_y=vals[5],
                score=vals[6],
                stage_costs=tuple(vals[7 : 7 + n_stages]),
                x=tuple(vals[7 + n_stages :]),
            )
        )

    config: dict = {}
    total_budget = rows[-1].consumed if rows else 0.0
    sidecar_path = path.with_suffix(".json")
    if sidecar_path.exists():
        try:
            doc = json.loads(sidecar_path.read_text(encoding="utf-8"))
            config = doc.get("config", {})
            total_budget = float(doc.get("resolved_total_budget", total_budget))
            name = doc.get("pipeline", path.stem)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise TraceParseError(f"bad sidecar: {exc}", str(sidecar_path))
    else:
        name = path.stem
    return RunTrace(
        pipeline_name=name, config=config, total_budget=total_budget, rows=rows
    )
