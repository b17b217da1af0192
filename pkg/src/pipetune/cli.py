"""Command-line harness: multi-seed method comparisons, ablation sweeps
over cache size / prefix policy / cooling schedule / epsilon, and trace
aggregation into summary and curve CSVs.

Exit codes: 0 success, 1 runtime failure (partial outputs retained),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgumentError, PipetuneError, TraceParseError
from .optimizer import METHODS, RunConfig, RunTrace, read_trace
from .optimizer import run as run_optimizer
from .pipeline import SYNTHETIC_SUITES, PipelineSpec, load_pipeline_file, synthetic_suite

CACHE_ROOT_ENV = "PIPETUNE_CACHE_ROOT"

ABLATION_LEVELS = {
    "cache_size": (0, 5, 10, 20, 30, 50),
    "prefix_policy": ("first", "mean", "all"),
    "eta": ("budget", "constant", "exp_decay"),
    "epsilon": (0.001, 0.01, 0.1, 1.0, 10.0, 100.0),
}

_SPECIAL_CSVS = ("summary.csv", "curves.csv", "ablation.csv")


@dataclass(frozen=True)
class SummaryRow:
    """Aggregate over one method's repeats."""

    pipeline: str
    method: str
    repeats: int
    mean_best: float
    se_best: float
    mean_iterations: float
    mean_consumed: float
    pct_improv_memo: float


# ---------------------------------------------------------------------------
# aggregation (pure functions of traces, reused by run and report)

def _improvement_flags(trace: RunTrace) -> list[tuple[bool, bool]]:
    """Per trace row: (improved the best so far, did so with a memoized
    prefix).  Counted over the whole run — the first improvement is always
    iteration 1 — so the memoized share is relative to every lift of the
    incumbent, not just the model-guided ones."""
    flags = []
    prev_best = float("-inf")
    for row in trace.rows:
        improved = row.best_y > prev_best
        flags.append((improved, improved and row.delta > 0))
        prev_best = row.best_y
    return flags


def summarize(traces: list[RunTrace]) -> list[SummaryRow]:
    """One row per (pipeline, method), averaged over that group's runs.
    Memoized-improvement percentage pools improvement counts across runs."""
    groups: dict[tuple[str, str], list[RunTrace]] = {}
    for t in traces:
        key = (t.pipeline_name, str(t.config.get("method", "unknown")))
        groups.setdefault(key, []).append(t)

    rows = []
    for (pipeline, method), group in sorted(groups.items()):
        bests = [t.best_y for t in group]
        n = len(bests)
        mean_best = sum(bests) / n
        se_best = (
            math.sqrt(sum((b - mean_best) ** 2 for b in bests) / (n - 1)) / math.sqrt(n)
            if n > 1
            else 0.0
        )
        improvements = 0
        memo_improvements = 0
        for t in group:
            for improved, with_memo in _improvement_flags(t):
                improvements += int(improved)
                memo_improvements += int(with_memo)
        rows.append(
            SummaryRow(
                pipeline=pipeline,
                method=method,
                repeats=n,
                mean_best=mean_best,
                se_best=se_best,
                mean_iterations=sum(len(t.post_warmup_rows()) for t in group) / n,
                mean_consumed=sum(t.consumed for t in group) / n,
                pct_improv_memo=(
                    100.0 * memo_improvements / improvements if improvements else 0.0
                ),
            )
        )
    return rows


def write_summary_csv(rows: list[SummaryRow], path: Path) -> None:
    lines = [
        "pipeline,method,repeats,mean_best,se_best,mean_iterations,"
        "mean_consumed,pct_improv_memo"
    ]
    for r in rows:
        lines.append(
            f"{r.pipeline},{r.method},{r.repeats},{r.mean_best:.17g},"
            f"{r.se_best:.17g},{r.mean_iterations:.17g},{r.mean_consumed:.17g},"
            f"{r.pct_improv_memo:.17g}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_curves_csv(traces: list[RunTrace], path: Path) -> None:
    """Long-format best-objective-versus-cost curves for external plotting."""
    lines = ["pipeline,method,seed,iter,consumed,best_y"]
    for t in traces:
        method = t.config.get("method", "unknown")
        seed = t.config.get("seed", "")
        for r in t.rows:
            lines.append(
                f"{t.pipeline_name},{method},{seed},{r.iteration},"
                f"{r.consumed:.17g},{r.best_y:.17g}"
            )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def print_summary(rows: list[SummaryRow], stream=None) -> None:
    stream = stream or sys.stdout
    header = (
        f"{'pipeline':<10} {'method':<7} {'T':>3} {'best (mean ± se)':>24} "
        f"{'iters':>7} {'consumed':>10} {'% improv w/ memo':>17}"
    )
    print(header, file=stream)
    print("-" * len(header), file=stream)
    for r in rows:
        best = f"{r.mean_best:.4f} ± {r.se_best:.4f}"
        print(
            f"{r.pipeline:<10} {r.method:<7} {r.repeats:>3} {best:>24} "
            f"{r.mean_iterations:>7.1f} {r.mean_consumed:>10.2f} "
            f"{r.pct_improv_memo:>16.1f}%",
            file=stream,
        )


def epsilon_insensitive(level_means: dict[float, tuple[float, float, int]]) -> tuple[bool, float, float]:
    """Given per-level (mean best, se, repeats), report whether the spread
    of level means stays within twice the pooled standard error of a level
    mean (pooled sd over the per-level repeat count)."""
    means = [m for m, _, _ in level_means.values()]
    spread = max(means) - min(means)
    pooled_var = 0.0
    total = 0
    repeats = 0
    for _, se, n in level_means.values():
        # se = sd / sqrt(n) -> recover per-level variance for pooling
        pooled_var += (se * math.sqrt(n)) ** 2 * max(n - 1, 0)
        total += max(n - 1, 0)
        repeats += n
    pooled_sd = math.sqrt(pooled_var / total) if total else 0.0
    n_bar = repeats / max(len(level_means), 1)
    pooled_se = pooled_sd / math.sqrt(max(n_bar, 1.0))
    threshold = 2.0 * pooled_se
    return spread <= threshold, spread, threshold


# ---------------------------------------------------------------------------
# run execution

def _load_pipeline(name: str | None, file: str | None) -> PipelineSpec:
    if file:
        return load_pipeline_file(file)
    if name in SYNTHETIC_SUITES:
        return synthetic_suite(name)
    raise InvalidArgumentError(
        f"unknown pipeline {name!r}; use one of {SYNTHETIC_SUITES} or --pipeline-file"
    )


def _execute_job(job: dict) -> str:
    """Run one (method, seed) tuning run; module-level so process pools can
    pickle it. Returns the trace path."""
    pipeline = _load_pipeline(job["pipeline_name"], job["pipeline_file"])
    config = RunConfig(**job["config"])
    run_optimizer(
        config,
        pipeline,
        trace_path=job["trace_path"],
        cache_root=job["cache_root"],
    )
    return job["trace_path"]


def _build_jobs(args, out_dir: Path, overrides: dict | None = None) -> list[dict]:
    overrides = overrides or {}
    cache_base = Path(os.environ.get(CACHE_ROOT_ENV, out_dir / "cache"))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise InvalidArgumentError(f"unknown method {m!r}; choose from {METHODS}")
    budget = args.budget if args.budget == "auto" else float(args.budget)
    jobs = []
    for method in methods:
        for i in range(args.repeats):
            seed = args.seed + i
            config = dict(
                method=method,
                n0=args.warmup,
                m=args.raw_samples,
                n_mc=args.mc_samples,
                restarts=args.acq_restarts,
                q=args.cache_size,
                epsilon=args.epsilon,
                eta_schedule=args.eta_schedule,
                prefix_policy=args.prefix_policy,
                total_budget=budget,
                seed=seed,
            )
            config.update(overrides)
            run_id = f"{args.pipeline or Path(args.pipeline_file).stem}_{method}_s{seed}"
            jobs.append(
                dict(
                    pipeline_name=args.pipeline,
                    pipeline_file=args.pipeline_file,
                    config=config,
                    trace_path=str(out_dir / f"{run_id}.csv"),
                    cache_root=str(cache_base / run_id),
                )
            )
    return jobs


def _run_jobs(jobs: list[dict], n_jobs: int) -> list[str]:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_execute_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_execute_job, jobs))


def _collect_traces(paths: list[str | Path]) -> list[RunTrace]:
    return [read_trace(p) for p in paths]


def cmd_run(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _load_pipeline(args.pipeline, args.pipeline_file)  # fail fast on bad spec
    jobs = _build_jobs(args, out_dir)
    paths = _run_jobs(jobs, args.jobs)
    traces = _collect_traces(paths)
    rows = summarize(traces)
    write_summary_csv(rows, out_dir / "summary.csv")
    write_curves_csv(traces, out_dir / "curves.csv")
    print_summary(rows)
    return 0


def cmd_ablate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _load_pipeline(args.pipeline, args.pipeline_file)
    levels = ABLATION_LEVELS[args.kind]

    level_rows: list[tuple[str, list[SummaryRow]]] = []
    for level in levels:
        if args.kind == "cache_size":
            overrides = {"q": int(level)}
        elif args.kind == "prefix_policy":
            overrides = {"prefix_policy": str(level)}
        elif args.kind == "eta":
            overrides = {"eta_schedule": str(level)}
        else:
            overrides = {"epsilon": float(level)}
        level_dir = out_dir / f"{args.kind}_{level}"
        level_dir.mkdir(parents=True, exist_ok=True)
        jobs = _build_jobs(args, level_dir, overrides)
        paths = _run_jobs(jobs, args.jobs)
        traces = _collect_traces(paths)
        rows = summarize(traces)
        write_summary_csv(rows, level_dir / "summary.csv")
        level_rows.append((str(level), rows))

    lines = [
        "level,pipeline,method,repeats,mean_best,se_best,mean_iterations,"
        "mean_consumed,pct_improv_memo"
    ]
    for level, rows in level_rows:
        for r in rows:
            lines.append(
                f"{level},{r.pipeline},{r.method},{r.repeats},{r.mean_best:.17g},"
                f"{r.se_best:.17g},{r.mean_iterations:.17g},{r.mean_consumed:.17g},"
                f"{r.pct_improv_memo:.17g}"
            )
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    for level, rows in level_rows:
        print(f"--- {args.kind} = {level} ---")
        print_summary(rows)

    if args.kind == "epsilon":
        per_level = {
            float(level): (rows[0].mean_best, rows[0].se_best, rows[0].repeats)
            for level, rows in level_rows
            if rows
        }
        flag, spread, threshold = epsilon_insensitive(per_level)
        verdict = "insensitive" if flag else "SENSITIVE"
        print(
            f"epsilon sweep: max-min of mean best = {spread:.6g}, "
            f"2x pooled se = {threshold:.6g} -> {verdict}"
        )
    return 0


def cmd_report(args) -> int:
    results_dir = Path(args.results_dir)
    if not results_dir.is_dir():
        raise InvalidArgumentError(f"not a directory: {results_dir}")
    paths = sorted(
        p
        for p in results_dir.glob("*.csv")
        if p.name not in _SPECIAL_CSVS
    )
    if not paths:
        raise InvalidArgumentError(f"no trace CSVs found in {results_dir}")
    traces = _collect_traces(paths)
    rows = summarize(traces)
    write_summary_csv(rows, results_dir / "summary.csv")
    write_curves_csv(traces, results_dir / "curves.csv")
    print_summary(rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pipeline", help=f"synthetic suite name: {', '.join(SYNTHETIC_SUITES)}")
    p.add_argument("--pipeline-file", help="JSON pipeline definition path")
    p.add_argument("--methods", default="eeipu", help="comma-separated methods")
    p.add_argument("--repeats", type=int, default=1, help="repeats per method")
    p.add_argument("--seed", type=int, default=0, help="base seed (repeat i uses seed+i)")
    p.add_argument("--budget", default="auto", help="total budget, or 'auto' (5x warmup)")
    p.add_argument("--warmup", type=int, default=10, help="warmup evaluations N0")
    p.add_argument("--cache-size", type=int, default=5, help="prefix sources kept (Q)")
    p.add_argument("--prefix-policy", default="all", choices=("all", "first", "mean"))
    p.add_argument("--eta-schedule", default="budget", choices=("budget", "constant", "exp_decay"))
    p.add_argument("--epsilon", type=float, default=0.01, help="memoized-stage modeled cost")
    p.add_argument("--raw-samples", type=int, default=512, help="candidates per batch (M)")
    p.add_argument("--mc-samples", type=int, default=1000, help="cost draws per candidate (D)")
    p.add_argument("--acq-restarts", type=int, default=10, help="candidate re-draws kept (r)")
    p.add_argument("--jobs", type=int, default=1, help="parallel independent runs")
    p.add_argument("--out", default="results", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipetune",
        description="Budget-constrained, memoization-aware tuning for multi-stage pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute methods x repeats and summarize")
    _add_common_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="sweep one knob at standard levels")
    p_abl.add_argument("kind", choices=tuple(ABLATION_LEVELS))
    _add_common_run_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("report", help="aggregate a directory of trace CSVs")
    p_rep.add_argument("results_dir", help="directory containing trace CSVs")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func in (cmd_run, cmd_ablate) and not (args.pipeline or args.pipeline_file):
        parser.error("one of --pipeline or --pipeline-file is required")
    try:
        return args.func(args)
    except (InvalidArgumentError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except TraceParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipetuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
