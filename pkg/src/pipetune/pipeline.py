"""Multi-stage pipeline abstraction: synthetic benchmark pipelines with
analytic per-stage objectives and costs, a generic external-command stage
adapter, and memoization-aware execution that skips cached prefixes.

The total objective of a synthetic pipeline is the sum of per-stage
functions, maximized; classical minimization benchmarks are negated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shlex
import struct
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cache import PrefixPool, StageOutputStore, lookup
from .candidates import SearchSpace
from .errors import (
    InvalidArgumentError,
    ProtocolError,
    StageExecutionError,
    StorageError,
)

logger = logging.getLogger("pipetune.pipeline")

COST_CURRENCIES = ("simulated", "seconds")

SYNTHETIC_SUITES = ("synth3", "synth5", "synth10")

# objective noise: y = f(x) + N(0, 1e-6), keyed by x for reproducibility
NOISE_STD = 1e-3

# wall-clock costs are clamped to stay strictly positive
MIN_WALL_COST = 1e-9

_PARTIAL = struct.Struct(">d")


# ---------------------------------------------------------------------------
# benchmark stage objectives (classical closed forms)

def branin(x: np.ndarray) -> float:
    """Branin function, minimization form; min 0.397887 at (pi, 2.275)."""
    x1, x2 = float(x[0]), float(x[1])
    b = 5.1 / (4.0 * math.pi**2)
    c = 5.0 / math.pi
    t = 1.0 / (8.0 * math.pi)
    return (x2 - b * x1 * x1 + c * x1 - 6.0) ** 2 + 10.0 * (1.0 - t) * math.cos(x1) + 10.0


_HARTMANN3_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_HARTMANN3_A = np.array(
    [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]]
)
_HARTMANN3_P = 1e-4 * np.array(
    [
        [3689.0, 1170.0, 2673.0],
        [4699.0, 4387.0, 7470.0],
        [1091.0, 8732.0, 5547.0],
        [381.0, 5743.0, 8828.0],
    ]
)


def hartmann3(x: np.ndarray) -> float:
    """Hartmann 3-D, minimization form; min -3.86278 inside the unit cube."""
    x = np.asarray(x, dtype=float)
    inner = np.sum(_HARTMANN3_A * (x[None, :] - _HARTMANN3_P) ** 2, axis=1)
    return float(-np.sum(_HARTMANN3_ALPHA * np.exp(-inner)))


def beale(x: np.ndarray) -> float:
    """Beale function, minimization form; min 0 at (3, 0.5)."""
    x1, x2 = float(x[0]), float(x[1])
    return (
        (1.5 - x1 + x1 * x2) ** 2
        + (2.25 - x1 + x1 * x2 * x2) ** 2
        + (2.625 - x1 + x1 * x2**3) ** 2
    )


def ackley(x: np.ndarray) -> float:
    """Ackley function (any dim), minimization form; min 0 at the origin."""
    x = np.asarray(x, dtype=float)
    d = x.size
    return float(
        -20.0 * math.exp(-0.2 * math.sqrt(np.sum(x * x) / d))
        - math.exp(np.sum(np.cos(2.0 * math.pi * x)) / d)
        + 20.0
        + math.e
    )


def michalewicz(x: np.ndarray) -> float:
    """Michalewicz function in its sine-product form, maximization form
    (peak about 1.8013 for 2-D on [0, pi]^2)."""
    x = np.asarray(x, dtype=float)
    i = np.arange(1, x.size + 1)
    return float(np.sum(np.sin(x) * np.sin(i * x * x / math.pi) ** 20))


@dataclass(frozen=True)
class BenchmarkFunction:
    """A classical test function plus its domain and the sign that turns it
    into a maximization stage objective (-1 negates minimization forms)."""

    name: str
    fn: Callable[[np.ndarray], float]
    dim: int
    bounds: tuple[tuple[float, float], ...]
    sign: float

    def stage_objective(self, x: np.ndarray) -> float:
        return self.sign * self.fn(x)


BENCHMARKS: dict[str, BenchmarkFunction] = {
    b.name: b
    for b in (
        BenchmarkFunction("branin2", branin, 2, ((-5.0, 10.0), (0.0, 15.0)), -1.0),
        BenchmarkFunction("hartmann3", hartmann3, 3, ((0.0, 1.0),) * 3, -1.0),
        BenchmarkFunction("beale2", beale, 2, ((-4.5, 4.5),) * 2, -1.0),
        BenchmarkFunction("ackley3", ackley, 3, ((-32.768, 32.768),) * 3, -1.0),
        BenchmarkFunction("michalewicz2", michalewicz, 2, ((0.0, math.pi),) * 2, 1.0),
    )
}


def default_stage_cost(x: np.ndarray) -> float:
    """Synthetic per-stage cost: cosine + quadratic + logistic components on
    the raw stage values, strictly positive (floor 0.1), with an uneven
    landscape of cheap and expensive regions."""
    x = np.asarray(x, dtype=float)
    s = float(np.sum(x))
    q = float(np.sum(x * x))
    c = 2.0 + math.cos(s) + 0.1 * q / x.size + 3.0 / (1.0 + math.exp(-s))
    return max(c, 0.1)


# ---------------------------------------------------------------------------
# pipeline domain types

@dataclass(frozen=True)
class StageSpec:
    """One pipeline stage: a synthetic (objective_fn, cost_fn) pair or an
    external command template with {x1}..{xn}, {input}, {output} slots."""

    name: str
    dim: int
    bounds: tuple[tuple[float, float], ...]
    kind: str = "synthetic"
    objective_fn: Optional[Callable[[np.ndarray], float]] = None
    cost_fn: Optional[Callable[[np.ndarray], float]] = None
    command: Optional[str] = None
    timeout: float = 300.0

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgumentError("stage dim must be >= 1")
        if len(self.bounds) != self.dim:
            raise InvalidArgumentError("bounds count must match stage dim")
        if any(not lo < hi for lo, hi in self.bounds):
            raise InvalidArgumentError("require lo < hi per bound")
        if self.kind == "synthetic":
            if self.objective_fn is None or self.cost_fn is None:
                raise InvalidArgumentError("synthetic stage needs objective and cost")
        elif self.kind == "external":
            if not self.command:
                raise InvalidArgumentError("external stage needs a command template")
        else:
            raise InvalidArgumentError(f"unknown stage kind: {self.kind!r}")


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    stages: tuple[StageSpec, ...]
    cost_currency: str = "simulated"
    noise_std: float = NOISE_STD

    def __post_init__(self):
        if not self.stages:
            raise InvalidArgumentError("pipeline needs at least one stage")
        if self.cost_currency not in COST_CURRENCIES:
            raise InvalidArgumentError(f"unknown cost currency: {self.cost_currency!r}")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.stages)

    def search_space(self) -> SearchSpace:
        lower = np.array([lo for s in self.stages for lo, _ in s.bounds])
        upper = np.array([hi for s in self.stages for _, hi in s.bounds])
        return SearchSpace(stage_dims=self.stage_dims, lower=lower, upper=upper)


@dataclass(frozen=True)
class Observation:
    """One full pipeline evaluation: memoized stages carry cost 0.0 here
    (they consumed nothing); the acquisition layer models them as epsilon."""

    x: np.ndarray
    y: float
    stage_costs: tuple[float, ...]
    memo_delta: int
    wall_time: float

    @property
    def executed_cost(self) -> float:
        return float(sum(self.stage_costs))


@dataclass(frozen=True)
class StageResult:
    output_handle: str
    cost: float


# ---------------------------------------------------------------------------
# execution

def _keyed_noise(x: np.ndarray, std: float) -> float:
    """Gaussian noise draw keyed by the bytes of x, so re-evaluating the
    same configuration (memoized or not) reproduces an identical y."""
    if std == 0.0:
        return 0.0
    digest = hashlib.sha256(np.asarray(x, dtype=float).tobytes()).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "big")))
    return std * float(rng.standard_normal())


def _substitute(template: str, stage_x: np.ndarray, input_path: str, output_path: str) -> str:
    text = template
    for i, v in enumerate(stage_x, start=1):
        text = text.replace(f"{{x{i}}}", repr(float(v)))
    return text.replace("{input}", input_path).replace("{output}", output_path)


def _run_external_stage(
    stage: StageSpec,
    stage_index: int,
    stage_x: np.ndarray,
    input_payload: bytes,
    workdir: Path,
) -> tuple[bytes, float, str]:
    """Execute one external stage; returns (output payload, wall seconds,
    stdout text)."""
    input_path = workdir / f"stage_{stage_index}_input"
    output_path = workdir / f"stage_{stage_index}_output"
    input_path.write_bytes(input_payload)
    command = _substitute(stage.command, stage_x, str(input_path), str(output_path))
    argv = shlex.split(command)
    start = time.perf_counter()
    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            timeout=stage.timeout,
            cwd=workdir,
        )
    except subprocess.TimeoutExpired as exc:
        raise StageExecutionError(
            f"stage command timed out after {stage.timeout}s",
            stage_index,
            output=str(exc.stdout or ""),
        )
    except OSError as exc:
        raise StageExecutionError(f"stage command failed to start: {exc}", stage_index)
    elapsed = time.perf_counter() - start
    if proc.returncode != 0:
        raise StageExecutionError(
            f"stage command exited with status {proc.returncode}",
            stage_index,
            output=(proc.stdout or "") + (proc.stderr or ""),
        )
    payload = output_path.read_bytes() if output_path.exists() else proc.stdout.encode()
    return payload, max(elapsed, MIN_WALL_COST), proc.stdout or ""


def _parse_objective(stdout: str, stage_index: int) -> float:
    lines = [ln.strip() for ln in stdout.splitlines() if ln.strip()]
    if not lines:
        raise ProtocolError(f"stage {stage_index} produced no output to parse")
    last = lines[-1]
    if not last.startswith("objective="):
        raise ProtocolError(
            f"stage {stage_index} last line {last!r} is not 'objective=<float>'"
        )
    try:
        return float(last.removeprefix("objective="))
    except ValueError:
        raise ProtocolError(f"stage {stage_index} objective value unparseable: {last!r}")


def run(
    spec: PipelineSpec,
    x: np.ndarray,
    pool: PrefixPool,
    cache: StageOutputStore,
) -> Observation:
    """Evaluate x end to end, skipping the longest cached prefix.

    Stages 1..delta are served from the cache (cost 0.0); stages delta+1..K
    execute and their outputs (all but the last stage's) are stored so this
    observation can seed future prefixes.
    """
    x = np.asarray(x, dtype=float)
    space = spec.search_space()
    if x.shape != (space.dim,):
        raise InvalidArgumentError(f"x must have shape ({space.dim},)")
    if not space.contains(x):
        raise InvalidArgumentError("x outside pipeline bounds")

    started = time.perf_counter()
    hit = lookup(pool, x)
    delta = hit.delta
    carry_payload = b""
    if delta > 0:
        try:
            carry_payload = cache.resolve(hit.output_handle)
        except StorageError as exc:
            logger.warning("cache resolution failed (%s); running full pipeline", exc)
            delta = 0

    k_total = spec.n_stages
    stage_costs = [0.0] * k_total
    synthetic = spec.stages[0].kind == "synthetic"

    if synthetic:
        carry = _PARTIAL.unpack(carry_payload)[0] if delta > 0 else 0.0
        for k in range(delta + 1, k_total + 1):
            stage = spec.stages[k - 1]
            stage_x = x[space.stage_slice(k)]
            carry += stage.objective_fn(stage_x)
            stage_costs[k - 1] = stage.cost_fn(stage_x)
            if k < k_total:
                cache.store_output(k, x[: space.prefix_width(k)], _PARTIAL.pack(carry))
        y = carry + _keyed_noise(x, spec.noise_std)
    else:
        with tempfile.TemporaryDirectory(prefix="pipetune_stage_") as tmp:
            workdir = Path(tmp)
            stdout = ""
            for k in range(delta + 1, k_total + 1):
                stage = spec.stages[k - 1]
                stage_x = x[space.stage_slice(k)]
                carry_payload, cost, stdout = _run_external_stage(
                    stage, k, stage_x, carry_payload, workdir
                )
                stage_costs[k - 1] = cost
                if k < k_total:
                    cache.store_output(k, x[: space.prefix_width(k)], carry_payload)
            y = _parse_objective(stdout, k_total)

    return Observation(
        x=x,
        y=float(y),
        stage_costs=tuple(stage_costs),
        memo_delta=delta,
        wall_time=time.perf_counter() - started,
    )


def output_handles(spec: PipelineSpec, cache: StageOutputStore, x: np.ndarray) -> list[str]:
    """Content-addressed handles of x's first K-1 stage outputs; all exist
    on disk after run(x) because stores are keyed by the prefix values."""
    space = spec.search_space()
    x = np.asarray(x, dtype=float)
    return [
        cache.handle_for(k, x[: space.prefix_width(k)])
        for k in range(1, spec.n_stages)
    ]


# ---------------------------------------------------------------------------
# synthetic suites and pipeline definition files

_SUITE_ORDER = ("branin2", "hartmann3", "beale2", "ackley3", "michalewicz2")


def synthetic_suite(name: str) -> PipelineSpec:
    """The 3-, 5-, and 10-stage synthetic benchmark pipelines (benchmark
    functions cycled in a fixed order, every stage using the default cost)."""
    if name == "synth3":
        picks = ("branin2", "hartmann3", "michalewicz2")
    elif name == "synth5":
        picks = _SUITE_ORDER
    elif name == "synth10":
        picks = _SUITE_ORDER * 2
    else:
        raise InvalidArgumentError(f"unknown synthetic suite: {name!r}")
    stages = []
    for k, bench_name in enumerate(picks, start=1):
        bench = BENCHMARKS[bench_name]
        stages.append(
            StageSpec(
                name=f"s{k}_{bench.name}",
                dim=bench.dim,
                bounds=bench.bounds,
                kind="synthetic",
                objective_fn=bench.stage_objective,
                cost_fn=default_stage_cost,
            )
        )
    return PipelineSpec(name=name, stages=tuple(stages), cost_currency="simulated")


def load_pipeline_file(path: str | Path) -> PipelineSpec:
    """Build a PipelineSpec from a JSON definition.

    Schema: {"name": str, "cost_currency": "simulated"|"seconds",
    "stages": [{"kind": "external", "dim": int, "bounds": [[lo, hi]..],
    "command": str, "timeout": float} | {"kind": "synthetic",
    "function": benchmark name}]}.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgumentError(f"cannot load pipeline file {path}: {exc}")

    stages = []
    for k, item in enumerate(doc.get("stages", []), start=1):
        kind = item.get("kind", "external")
        if kind == "synthetic":
            bench = BENCHMARKS.get(item.get("function", ""))
            if bench is None:
                raise InvalidArgumentError(
                    f"stage {k}: unknown benchmark {item.get('function')!r}"
                )
            stages.append(
                StageSpec(
                    name=item.get("name", f"s{k}_{bench.name}"),
                    dim=bench.dim,
                    bounds=bench.bounds,
                    kind="synthetic",
                    objective_fn=bench.stage_objective,
                    cost_fn=default_stage_cost,
                )
            )
        else:
            bounds = tuple((float(lo), float(hi)) for lo, hi in item["bounds"])
            stages.append(
                StageSpec(
                    name=item.get("name", f"s{k}"),
                    dim=int(item["dim"]),
                    bounds=bounds,
                    kind="external",
                    command=item["command"],
                    timeout=float(item.get("timeout", 300.0)),
                )
            )
    if not stages:
        raise InvalidArgumentError(f"pipeline file {path} defines no stages")
    return PipelineSpec(
        name=doc.get("name", path.stem),
        stages=tuple(stages),
        cost_currency=doc.get("cost_currency", "seconds"),
        noise_std=float(doc.get("noise_std", 0.0))
        if "noise_std" in doc
        else (NOISE_STD if all(s.kind == "synthetic" for s in stages) else 0.0),
    )
