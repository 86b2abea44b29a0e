"""Evolution Strategies search over the schedule space.

The search maximizes F = -score. Each iteration perturbs the continuous
parameter vector with Gaussian noise, evaluates the population (optionally in
parallel), and applies the noise-weighted update. The returned schedule is the
best candidate ever evaluated, not the decode of the final parameters.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import cost as cost_mod
from .ir import LoopProgram, Schedule, SpaceAxis, apply_schedule, emit_mock_asm, space_axes


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class EsParams:
    alpha: float = 0.05
    sigma: float = 0.3
    population: int = 32
    iterations: int = 100
    seed: int = 0
    rank_normalize: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.sigma <= 0:
            raise ValueError("alpha and sigma must be positive")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class ThetaEncoding:
    """Maps a continuous vector onto discrete per-axis schedule choices."""

    axes: tuple[SpaceAxis, ...]

    @property
    def dim(self) -> int:
        return len(self.axes)

    def initial(self) -> np.ndarray:
        return np.array([(len(ax.choices) - 1) / 2.0 for ax in self.axes])

    def decode(self, theta: np.ndarray) -> Schedule:
        transforms = []
        for x, ax in zip(theta, self.axes):
            idx = int(np.clip(round(float(x)), 0, len(ax.choices) - 1))
            transforms.extend(ax.choices[idx])
        return Schedule(tuple(transforms))


def _shape_fitness(values: np.ndarray) -> np.ndarray:
    """Centered rank transform onto [-0.5, 0.5]; stabilizes the step size."""
    n = len(values)
    if n == 1 or np.ptp(values) == 0:
        return np.zeros(n)
    order = np.argsort(np.argsort(values, kind="stable"), kind="stable")
    return order / (n - 1) - 0.5


def es_step(theta: np.ndarray, params: EsParams, objective,
            rng: np.random.Generator | None = None,
            noise: np.ndarray | None = None,
            diagnostics: list[str] | None = None) -> np.ndarray:
    """One update: theta + alpha/(n*sigma) * sum(F_i * eps_i)."""
    theta = np.asarray(theta, dtype=float)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    if noise is None:
        noise = rng.standard_normal((params.population, theta.shape[0]))
    values = np.array([objective(theta + params.sigma * eps) for eps in noise], dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        if diagnostics is not None:
            diagnostics.append(f"{int(bad.sum())} non-finite objective values replaced by population minimum")
        fill = values[~bad].min() if (~bad).any() else 0.0
        values = np.where(bad, fill, values)
    weights = _shape_fitness(values) if params.rank_normalize else values
    update = (params.alpha / (params.population * params.sigma)) * (weights @ noise)
    return theta + update


def evaluate_population(thetas, objective, jobs: int | None = None,
                        errors: list | None = None) -> list:
    """Evaluate candidates concurrently; results keep input order.

    Per-candidate exceptions are recorded (as (index, exception) in `errors`)
    and yield None in the result list instead of aborting the batch.
    """
    def safe(i_theta):
        i, theta = i_theta
        try:
            return objective(theta)
        except Exception as e:  # noqa: BLE001 - recorded, not swallowed silently
            if errors is not None:
                errors.append((i, e))
            return None

    items = list(enumerate(thetas))
    if jobs is not None and jobs <= 1:
        return [safe(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(safe, items))


@dataclass
class OptimizeResult:
    best_schedule: Schedule
    best_score: float
    best_features: "cost_mod.FeatureVector"
    trace: list  # per-iteration incumbent best score
    evaluated: dict  # schedule json-key -> score
    evaluations: int
    diagnostics: list


def optimize(program: LoopProgram, space: dict, arch: "cost_mod.ArchSpec",
             params: EsParams, jobs: int | None = None,
             launch=None) -> OptimizeResult:
    """ES search for the lowest-scoring schedule in the described space."""
    axes = tuple(space_axes(program, space))
    if not axes:
        raise SearchError("empty schedule space")
    enc = ThetaEncoding(axes)
    diagnostics: list[str] = []
    cache: dict[str, tuple[float, "cost_mod.FeatureVector"]] = {}
    evaluations = [0]

    lock = threading.Lock()

    def evaluate_schedule(s: Schedule) -> tuple[float, "cost_mod.FeatureVector"]:
        key = json.dumps(s.to_json())
        with lock:
            if key in cache:
                return cache[key]
        try:
            transformed = apply_schedule(program, s)
            code = emit_mock_asm(transformed, arch.target)
            fv = cost_mod.extract_features(transformed, code, arch, launch)
            result = (cost_mod.score(fv, arch), fv)
        except Exception as e:
            raise SearchError(f"candidate {key} failed: {e}") from e
        with lock:
            if key not in cache:
                cache[key] = result
                evaluations[0] += 1
        return cache[key]

    def objective(theta: np.ndarray) -> float:
        return -evaluate_schedule(enc.decode(theta))[0]

    theta = enc.initial()
    best_key = None
    trace: list[float] = []
    ss = np.random.SeedSequence(params.seed)
    children = ss.spawn(params.iterations)

    # evaluate the starting point so a 1-schedule space needs a single batch
    start_sched = enc.decode(theta)
    start_score, _ = evaluate_schedule(start_sched)
    best_key = json.dumps(start_sched.to_json())
    single = all(len(ax.choices) == 1 for ax in axes)

    for t in range(params.iterations):
        if single:
            break
        rng = np.random.default_rng(children[t])
        noise = rng.standard_normal((params.population, enc.dim))
        # decode and evaluate the distinct candidates (ordered, parallel)
        cands = [enc.decode(theta + params.sigma * eps) for eps in noise]
        errors: list = []
        evaluate_population(cands, evaluate_schedule, jobs=jobs, errors=errors)
        for i, e in errors:
            raise SearchError(f"population candidate {i} failed at iteration {t}: {e}")
        theta = es_step(theta, params, objective, noise=noise, diagnostics=diagnostics)
        best_key = min(cache, key=lambda k: (cache[k][0], k))
        trace.append(cache[best_key][0])

    best_key = min(cache, key=lambda k: (cache[k][0], k))
    if not trace:
        trace = [cache[best_key][0]]
    best_score, best_fv = cache[best_key]
    return OptimizeResult(
        best_schedule=Schedule.from_json(json.loads(best_key)),
        best_score=best_score,
        best_features=best_fv,
        trace=trace,
        evaluated={k: v[0] for k, v in cache.items()},
        evaluations=evaluations[0],
        diagnostics=diagnostics,
    )
