"""Acceptance gate: fourteen criteria, one test each, executed in order.

Criteria 1-7 are desk-scale property/oracle checks; criteria 8-13 compare
five-seed benchmark runs on the 3-stage synthetic suite (shared via the
session fixtures in conftest.py); criterion 14 bounds cache overhead.

Each criterion records one pass/fail line (echoed by the terminal-summary
hook in conftest.py so the lines always appear at the end of the run log)
and then asserts, so a red criterion is also a red test.
"""

import hashlib
import math
import statistics
import time

import numpy as np
import pytest

from pipetune.acquisition import (
    BudgetState,
    CostEstimate,
    cooling_eta,
    expected_improvement_batch,
    expected_inverse_cost,
)
from pipetune.cache import (
    StageOutputStore,
    empty_pool,
    lookup,
    update_pool,
)
from pipetune.candidates import SearchSpace
from pipetune.cli import _improvement_flags, epsilon_insensitive
from pipetune.gp import KernelParams, build_model, matern52, posterior_mean_var
from pipetune.optimizer import (
    ModelSet,
    RunConfig,
    derived_rng,
    run,
    score_candidates,
    write_trace,
)
from pipetune.pipeline import Observation, synthetic_suite

from conftest import SEEDS


RESULTS: list[str] = []


def _check(num: int, name: str, ok: bool, detail: str) -> None:
    mark = "PASS" if ok else "FAIL"
    line = f"criterion {num:2d} [{mark}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. closed-form expected improvement vs Monte-Carlo oracle


def test_criterion_01_ei_matches_mc_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        mu = float(rng.uniform(-3.0, 3.0))
        sigma = float(rng.uniform(0.05, 3.0))
        f_best = float(rng.uniform(-3.0, 3.0))
        closed = float(
            expected_improvement_batch(
                np.array([mu]), np.array([sigma * sigma]), f_best
            )[0]
        )
        draws = mu + sigma * rng.standard_normal(1_000_000)
        mc = float(np.mean(np.maximum(draws - f_best, 0.0)))
        tol = 3e-3 * max(sigma, 1.0)
        worst = max(worst, abs(closed - mc) / tol)
    _check(
        1,
        "EI closed form vs 1e6-draw MC",
        worst <= 1.0,
        f"worst |closed-MC| = {worst:.3f}x the 3e-3*max(sigma,1) tolerance",
    )


# ---------------------------------------------------------------------------
# 2. GP posterior exactness


def _dense_oracle(x, y, params, queries):
    shift, scale = float(np.mean(y)), float(np.std(y))
    if scale < 1e-12:
        scale = 1.0
    z = (np.asarray(y) - shift) / scale

    def k(a, b):
        return np.array([[matern52(ai, bi, params) for bi in b] for ai in a])

    gram = k(x, x) + params.noise_variance * np.eye(len(x))
    inv = np.linalg.inv(gram)
    ks = k(queries, x)
    mean = ks @ inv @ z
    var = np.array(
        [matern52(q, q, params) for q in queries]
    ) - np.einsum("ij,jk,ik->i", ks, inv, ks)
    return shift + scale * mean, scale * scale * np.maximum(var, 0.0)


def test_criterion_02_gp_exactness():
    # (a) near-noiseless interpolation of three training points
    params3 = KernelParams(
        lengthscales=np.array([0.4, 0.4]), output_scale=1.5, noise_variance=1e-8
    )
    x3 = np.array([[0.1, 0.2], [0.5, 0.9], [0.8, 0.3]])
    y3 = np.array([1.0, -2.0, 0.5])
    model3 = build_model(list(zip(x3, y3)), params3)
    mean3, _ = posterior_mean_var(model3, x3)
    interp_err = float(np.max(np.abs(mean3 - y3)))

    # (b) posterior mean/variance vs an explicit dense-inverse oracle
    rng = np.random.default_rng(21)
    oracle_err = 0.0
    for _ in range(10):
        params = KernelParams(
            lengthscales=rng.uniform(0.3, 1.5, size=3),
            output_scale=float(rng.uniform(0.5, 2.0)),
            noise_variance=float(rng.uniform(1e-4, 1e-2)),
        )
        x = rng.uniform(0.0, 1.0, size=(4, 3))
        y = rng.standard_normal(4)
        queries = rng.uniform(0.0, 1.0, size=(6, 3))
        model = build_model(list(zip(x, y)), params)
        mean, var = posterior_mean_var(model, queries)
        omean, ovar = _dense_oracle(x, y, params, queries)
        oracle_err = max(
            oracle_err,
            float(np.max(np.abs(mean - omean))),
            float(np.max(np.abs(var - ovar))),
        )
    _check(
        2,
        "GP exactness",
        interp_err <= 1e-4 and oracle_err <= 1e-8,
        f"interpolation err {interp_err:.2e} (tol 1e-4), "
        f"dense-oracle err {oracle_err:.2e} (tol 1e-8)",
    )


# ---------------------------------------------------------------------------
# 3. expected inverse cost estimator


def test_criterion_03_inverse_cost_estimator():
    # constant-cost degeneracy: every draw totals the same, so the estimate
    # is exactly the reciprocal of the stage-cost sum
    d = 64
    const = CostEstimate(
        per_stage_samples=np.vstack(
            [np.full(d, 2.0), np.full(d, 3.0), np.full(d, 1.0)]
        ),
        delta=0,
        epsilon=0.01,
    )
    const_err = abs(expected_inverse_cost(const) - 1.0 / 6.0)

    # log-normal stage costs at the working sample count vs a large oracle
    mus = np.array([0.1, 0.5, -0.2])
    sds = np.array([0.3, 0.2, 0.4])

    def draw(n, rng):
        return np.exp(mus[:, None] + sds[:, None] * rng.standard_normal((3, n)))

    est = expected_inverse_cost(
        CostEstimate(
            per_stage_samples=draw(10_000, np.random.default_rng(31)),
            delta=0,
            epsilon=0.01,
        )
    )
    oracle = float(
        np.mean(1.0 / np.sum(draw(1_000_000, np.random.default_rng(32)), axis=0))
    )
    rel_err = abs(est - oracle) / oracle
    _check(
        3,
        "inverse-cost estimator",
        const_err == 0.0 and rel_err <= 0.02,
        f"constant-case err {const_err:.1e} (tol 0), "
        f"log-normal rel err {rel_err:.4f} (tol 0.02)",
    )


# ---------------------------------------------------------------------------
# 4. memoization gate


def test_criterion_04_memoization_gate():
    pipe = synthetic_suite("synth3")
    space = pipe.search_space()
    rng = np.random.default_rng(41)
    xs = space.uniform(rng, 6)
    deltas = np.array([0, 1, 2, 0, 2, 1])
    stage_costs = (2.0, 3.0, 4.0)

    def flat_cost_model(dim, cost):
        # vanishing signal variance pins every posterior draw at log(cost)
        params = KernelParams(
            lengthscales=np.full(dim, 1.0),
            output_scale=1e-18,
            noise_variance=1e-6,
        )
        pts = [
            (np.full(dim, 0.2), math.log(cost)),
            (np.full(dim, 0.8), math.log(cost)),
        ]
        return build_model(pts, params)

    costs = tuple(
        flat_cost_model(space.stage_dims[k], stage_costs[k]) for k in range(3)
    )
    obj_pts = [(space.normalize(x[None, :])[0], float(i)) for i, x in enumerate(xs)]
    objective = build_model(
        obj_pts,
        KernelParams(
            lengthscales=np.full(7, 0.5), output_scale=1.0, noise_variance=1e-4
        ),
    )
    models = ModelSet(objective=objective, costs=costs)

    eta, eps, f_best = 0.7, 0.01, -1.0
    scores = score_candidates(
        "eeipu",
        models,
        space,
        xs,
        deltas,
        f_best,
        eta,
        eps,
        200,
        [derived_rng(42, 104, k) for k in range(3)],
    )

    mean, var = posterior_mean_var(models.objective, space.normalize(xs))
    ei = expected_improvement_batch(mean, var, f_best)
    worst = 0.0
    for i, delta in enumerate(deltas):
        modeled = sum(eps for k in range(1, delta + 1)) + sum(
            stage_costs[k - 1] for k in range(delta + 1, 4)
        )
        closed = float(ei[i]) * (1.0 / modeled) ** eta
        worst = max(worst, abs(float(scores[i]) - closed))
    _check(
        4,
        "memoization gate algebra",
        worst <= 1e-9,
        f"max |score - EI*(1/(delta*eps + suffix))^eta| = {worst:.2e} (tol 1e-9)",
    )


# ---------------------------------------------------------------------------
# 5. cooling schedules


def test_criterion_05_eta_schedules():
    budget = BudgetState(total_budget=100.0)
    etas = []
    for consumed in (0.0, 10.0, 35.0, 60.0, 99.0, 100.0, 140.0):
        budget.consumed = consumed
        etas.append(cooling_eta(budget, "budget"))
    nonincreasing = all(b <= a for a, b in zip(etas, etas[1:]))
    hits_zero = etas[-2] == 0.0 and etas[-1] == 0.0

    state = BudgetState(total_budget=1.0, eta=1.0)
    decay_err = 0.0
    for t in range(1, 31):
        state.eta = cooling_eta(state, "exp_decay")
        decay_err = max(decay_err, abs(state.eta - 0.9**t))
    _check(
        5,
        "eta schedules",
        nonincreasing and hits_zero and decay_err <= 1e-12,
        f"budget nonincreasing={nonincreasing}, zero at exhaustion={hits_zero}, "
        f"exp-decay err {decay_err:.1e} (tol 1e-12)",
    )


# ---------------------------------------------------------------------------
# 6. cache invariants under randomized operations


class _ReferencePool:
    """Brute-force model: {widest prefix values: (objective, order)} with
    the same in-place-update / strict-eviction / latest-tie rules."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.items: dict[tuple, tuple[float, int]] = {}
        self.counter = 0

    def offer(self, key, objective):
        if key in self.items:
            obj, order = self.items[key]
            if objective > obj:
                self.items[key] = (objective, order)
            return
        if len(self.items) >= self.capacity:
            worst_key = min(self.items, key=lambda k: (self.items[k][0], -self.items[k][1]))
            if not objective > self.items[worst_key][0]:
                return
            del self.items[worst_key]
        self.items[key] = (objective, self.counter)
        self.counter += 1

    def expected_delta(self, vals):
        if any(k == vals[:3] for k in self.items):
            return 2
        if any(k[:2] == vals[:2] for k in self.items):
            return 1
        return 0


def test_criterion_06_cache_randomized_invariants():
    stage_dims = (2, 1, 2)
    capacity = 5
    n_stages = len(stage_dims)
    pool = empty_pool(stage_dims, capacity=capacity)
    ref = _ReferencePool(capacity)
    rng = np.random.default_rng(61)
    grid = np.array([0.0, 0.25, 0.5, 0.75, 1.0])

    def handle_of(delta, values):
        digest = hashlib.sha256(np.asarray(values, dtype=float).tobytes()).hexdigest()
        return f"stage_{delta}/{digest}"

    checked_ops = 0
    for _ in range(10_000):
        x = rng.choice(grid, size=5)
        if rng.uniform() < 0.7:
            y = float(rng.standard_normal())
            obs = Observation(
                x=x, y=y, stage_costs=(1.0, 1.0, 1.0), memo_delta=0, wall_time=0.0
            )
            handles = [handle_of(d, x[: (2, 3)[d - 1]]) for d in (1, 2)]
            pool = update_pool(pool, obs, handles, policy="all")
            ref.offer(tuple(float(v) for v in x[:3]), y)

            # mirror image: retained sources == reference's top-Q map
            got = {
                max(s.entries, key=lambda e: e.delta).values: s.objective
                for s in pool.sources
            }
            want = {k: obj for k, (obj, _) in ref.items.items()}
            assert got == want
            # whole sources: every retained source carries all policy deltas
            assert all(
                sorted(e.delta for e in s.entries) == list(range(1, n_stages))
                for s in pool.sources
            )
            # entry bound
            assert len(pool.all_entries()) <= capacity * (n_stages - 1) + 1
        else:
            vals = tuple(float(v) for v in rng.choice(grid, size=5))
            res = lookup(pool, vals)
            assert res.delta == ref.expected_delta(vals)
            if res.delta:
                width = (2, 3)[res.delta - 1]
                assert res.output_handle == handle_of(res.delta, vals[:width])
            else:
                assert res.output_handle is None
        checked_ops += 1
    _check(
        6,
        "cache invariants",
        checked_ops == 10_000,
        f"top-Q ranking, whole-source eviction, exact lookup and entry bound "
        f"held for {checked_ops} randomized operations",
    )


# ---------------------------------------------------------------------------
# 7. end-to-end determinism


def test_criterion_07_deterministic_traces(tmp_path):
    pipe = synthetic_suite("synth3")
    config = dict(method="eeipu", seed=9, n0=3, m=16, n_mc=30, restarts=2,
                  total_budget=60.0)
    blobs = []
    for attempt in ("first", "second"):
        trace = run(
            RunConfig(**config), pipe, cache_root=tmp_path / f"cache_{attempt}"
        )
        path = tmp_path / f"{attempt}.csv"
        write_trace(trace, path)
        blobs.append((path.read_bytes(), path.with_suffix(".json").read_bytes()))
    identical = blobs[0] == blobs[1]
    _check(
        7,
        "end-to-end determinism",
        identical,
        f"two seed-9 runs produced byte-identical trace CSV+sidecar: {identical}",
    )


# ---------------------------------------------------------------------------
# 8-13. five-seed benchmark comparisons (shared fixtures)


def test_criterion_08_iteration_advantage(paired_traces):
    iters = {
        m: [len(paired_traces[(m, s)].post_warmup_rows()) for s in SEEDS]
        for m in ("eeipu", "ei")
    }
    med_eeipu = statistics.median(iters["eeipu"])
    med_ei = statistics.median(iters["ei"])
    ratio = med_eeipu / med_ei
    _check(
        8,
        "iteration advantage",
        ratio >= 1.5,
        f"median post-warmup iterations {med_eeipu:g} vs {med_ei:g} "
        f"(ratio {ratio:.3f}, need >= 1.5)",
    )


def test_criterion_09_objective_advantage(paired_traces):
    bests = {
        m: [paired_traces[(m, s)].best_y for s in SEEDS] for m in ("eeipu", "ei")
    }
    med_eeipu = statistics.median(bests["eeipu"])
    med_ei = statistics.median(bests["ei"])
    wins = sum(a >= b for a, b in zip(bests["eeipu"], bests["ei"]))
    _check(
        9,
        "objective advantage",
        med_eeipu >= med_ei and wins >= 4,
        f"median best {med_eeipu:.3f} vs {med_ei:.3f}, per-seed wins {wins}/5 "
        f"(need median >= and wins >= 4)",
    )


def test_criterion_10_low_cost_first(paired_traces):
    hits = 0
    details = []
    for s in SEEDS:
        rows = paired_traces[("eeipu", s)].post_warmup_rows()
        q = max(1, len(rows) // 4)
        first = np.mean([sum(r.stage_costs) for r in rows[:q]])
        last = np.mean([sum(r.stage_costs) for r in rows[-q:]])
        hits += first < last
        details.append(f"{first:.1f}<{last:.1f}" if first < last else f"{first:.1f}>={last:.1f}")
    _check(
        10,
        "low-cost-first behavior",
        hits >= 4,
        f"first-quartile mean executed cost below last quartile in {hits}/5 seeds "
        f"({', '.join(details)})",
    )


def test_criterion_11_memoization_contribution(paired_traces):
    improvements = 0
    with_memo = 0
    for s in SEEDS:
        for improved, memo in _improvement_flags(paired_traces[("eeipu", s)]):
            improvements += int(improved)
            with_memo += int(memo)
    frac = with_memo / improvements
    _check(
        11,
        "memoization contribution",
        0.05 <= frac <= 0.70 and with_memo > 0,
        f"{with_memo}/{improvements} best-improving iterations were memoized "
        f"({100 * frac:.1f}%, need 5-70% and nonzero)",
    )


def test_criterion_12_eta_ablation_ordering(paired_traces, expdecay_traces):
    budget_med = statistics.median(
        paired_traces[("eeipu", s)].best_y for s in SEEDS
    )
    decay_med = statistics.median(expdecay_traces[s].best_y for s in SEEDS)
    _check(
        12,
        "eta ablation ordering",
        budget_med >= decay_med,
        f"budget-schedule median best {budget_med:.3f} >= exp-decay {decay_med:.3f}",
    )


def test_criterion_13_epsilon_insensitivity(epsilon_traces):
    levels = {}
    for eps, traces in epsilon_traces.items():
        bests = [t.best_y for t in traces]
        mean = statistics.mean(bests)
        se = statistics.stdev(bests) / math.sqrt(len(bests))
        levels[eps] = (mean, se, len(bests))
    ok, spread, threshold = epsilon_insensitive(levels)
    _check(
        13,
        "epsilon insensitivity",
        ok,
        f"max-min of mean best {spread:.3f} vs 2x pooled se {threshold:.3f}",
    )


# ---------------------------------------------------------------------------
# 14. cache overhead


def test_criterion_14_cache_overhead(tmp_path):
    store = StageOutputStore(tmp_path / "store")
    pool = empty_pool((2, 1, 2), capacity=5)
    rng = np.random.default_rng(141)
    payload = bytes(256)
    start = time.perf_counter()
    for _ in range(100):
        x = rng.uniform(0.0, 1.0, size=5)
        lookup(pool, x)
        handles = [
            store.store_output(1, x[:2], payload),
            store.store_output(2, x[:3], payload),
        ]
        obs = Observation(
            x=x,
            y=float(rng.standard_normal()),
            stage_costs=(1.0, 1.0, 1.0),
            memo_delta=0,
            wall_time=0.0,
        )
        pool = update_pool(pool, obs, handles, policy="all")
    per_iter = (time.perf_counter() - start) / 100
    _check(
        14,
        "cache overhead",
        per_iter < 1e-3,
        f"store+lookup {per_iter * 1e6:.0f} us per iteration (limit 1 ms)",
    )
