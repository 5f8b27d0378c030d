"""Informativity-weight selection by coarse-to-fine grid search.

Stages walk the step schedule: evaluate the full coarse grid, then search a
one-coarse-cell window around the incumbent at each finer step. Objectives are
memoized per lambda, so nothing is decoded twice within one search. Ties go to
the smaller lambda everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import DecodeConfig, RefGameContext
from .decoding import Method, MethodSpec, lambda_range
from .evaluation import ScorerSet, evaluate_method


@dataclass(frozen=True)
class SearchSpec:
    lo: float
    hi: float
    steps: tuple[float, ...] = (0.1, 0.01, 0.001)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if any(s <= 0 for s in self.steps) or list(self.steps) != sorted(self.steps, reverse=True):
            raise ValueError("steps must be positive and strictly decreasing")
        if len(set(self.steps)) != len(self.steps):
            raise ValueError("steps must be strictly decreasing")


def grid_points(lo: float, hi: float, step: float) -> list[float]:
    """lo, lo+step, ... clipped to hi; values rounded to the step's precision."""
    nd = max(0, int(round(-math.log10(step))))
    points = []
    i = 0
    while True:
        lam = round(lo + i * step, nd)
        if lam > hi + step * 1e-9:
            break
        points.append(min(lam, hi))
        i += 1
    if points[-1] < hi:
        points.append(hi)
    return points


@dataclass
class SearchResult:
    lambda_star: float
    value: float
    evaluated: list[tuple[float, float]] = field(default_factory=list)


def coarse_to_fine_search(objective, spec: SearchSpec,
                          exhaustive_fine: bool = False) -> SearchResult:
    """Maximize `objective` over [lo, hi] following the step schedule.

    `exhaustive_fine` swaps the windowed refinement for a full grid at the
    finest step (escape hatch for multimodal objectives).
    """
    memo: dict[float, float] = {}
    evaluated: list[tuple[float, float]] = []

    def ev(lam: float) -> float:
        if lam not in memo:
            memo[lam] = float(objective(lam))
            evaluated.append((lam, memo[lam]))
        return memo[lam]

    best_lam = None
    best_val = -math.inf

    def scan(points):
        nonlocal best_lam, best_val
        for lam in points:
            val = ev(lam)
            if val > best_val or (val == best_val and (best_lam is None or lam < best_lam)):
                best_lam, best_val = lam, val

    scan(grid_points(spec.lo, spec.hi, spec.steps[0]))
    for prev_step, step in zip(spec.steps, spec.steps[1:]):
        if exhaustive_fine and step == spec.steps[-1]:
            scan(grid_points(spec.lo, spec.hi, step))
        else:
            lo = max(spec.lo, round(best_lam - prev_step, 12))
            hi = min(spec.hi, round(best_lam + prev_step, 12))
            scan(grid_points(lo, hi, step))
    return SearchResult(lambda_star=best_lam, value=best_val, evaluated=evaluated)


@dataclass
class TuningResult:
    method: str
    objective: str
    lo: float
    hi: float
    schedule: tuple[float, ...]
    evaluated: list[tuple[float, float]]
    lambda_star: float
    value: float

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "objective": self.objective,
            "range": [self.lo, self.hi],
            "schedule": list(self.schedule),
            "evaluated": [[lam, val] for lam, val in self.evaluated],
            "chosen": self.lambda_star,
            "value": self.value,
        }


def _default_spec(method: Method, spec: SearchSpec | None) -> SearchSpec:
    if spec is not None:
        return spec
    lo, hi = lambda_range(method)
    if lo == hi:
        raise ValueError(f"method {method.value} has no informativity parameter to tune")
    return SearchSpec(lo, hi)


def select_lambda_informativity(method: Method, problems: list[RefGameContext],
                                scorers: ScorerSet, config: DecodeConfig,
                                spec: SearchSpec | None = None,
                                exhaustive_fine: bool = False,
                                jobs: int = 1) -> TuningResult:
    """Pick the lambda maximizing evaluative-listener retrieval accuracy."""
    if not problems:
        raise ValueError("validation problems must be non-empty")
    spec = _default_spec(method, spec)

    def objective(lam: float) -> float:
        report = evaluate_method(MethodSpec(method, lam), problems, scorers, config,
                                 jobs=jobs)
        return report.retrieval_accuracy

    res = coarse_to_fine_search(objective, spec, exhaustive_fine=exhaustive_fine)
    return TuningResult(
        method=method.value, objective="maximize_accuracy",
        lo=spec.lo, hi=spec.hi, schedule=spec.steps,
        evaluated=res.evaluated, lambda_star=res.lambda_star, value=res.value,
    )


def select_lambda_ppl_matched(method: Method, problems: list[RefGameContext],
                              scorers: ScorerSet, config: DecodeConfig,
                              target_ppl: float, spec: SearchSpec | None = None,
                              exhaustive_fine: bool = False,
                              jobs: int = 1) -> TuningResult:
    """Pick the lambda whose mean caption perplexity is closest to the target."""
    if target_ppl < 1:
        raise ValueError("target perplexity must be >= 1")
    if not problems:
        raise ValueError("validation problems must be non-empty")
    spec = _default_spec(method, spec)
    ppl_at: dict[float, float] = {}

    def objective(lam: float) -> float:
        report = evaluate_method(MethodSpec(method, lam), problems, scorers, config,
                                 jobs=jobs)
        ppl_at[lam] = report.mean_perplexity
        return -abs(report.mean_perplexity - target_ppl)

    res = coarse_to_fine_search(objective, spec, exhaustive_fine=exhaustive_fine)
    return TuningResult(
        method=method.value, objective=f"match_ppl({target_ppl!r})",
        lo=spec.lo, hi=spec.hi, schedule=spec.steps,
        evaluated=[(lam, ppl_at[lam]) for lam, _ in res.evaluated],
        lambda_star=res.lambda_star, value=ppl_at[res.lambda_star],
    )


def mid_ppl_target(base_mean_ppl: float, picl_mean_ppl: float) -> float:
    """Intermediate fluency target: mean of the two aggregate perplexities."""
    return (base_mean_ppl + picl_mean_ppl) / 2.0
