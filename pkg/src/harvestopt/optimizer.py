"""Gradient descent on trajectory parameters with Armijo backtracking.

Each iteration simulates the system at the current parameters (averaging
over replications when arrivals are stochastic), propagates sensitivities
to get the sample cost gradient, and backtracks along the negative
gradient until sufficient decrease. Within an iteration all line-search
evaluations reuse the same random draws (common random numbers) so the
comparisons are on one sample path per replication.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .hybridsim import SimulationError, simulate
from .ipa import TangentialCrossing, run_ipa
from .objective import CostBreakdown, sample_cost, sample_gradient
from .scenario import Scenario
from .trajectory import (
    DegenerateTrajectory,
    EllipseParams,
    FourierParams,
    SegmentedTrajectory,
    flatten_all,
    normalize_orientation,
    with_flat_all,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 50
    step_init: float = 1.0
    backtrack: float = 0.5
    decrease_coeff: float = 1e-4
    max_backtracks: int = 30
    grad_tol: float = 1e-5
    replications: int = 1
    seed_policy: str = "common"  # "common" (reuse draws within an iteration) | "fresh"
    ipa_mode: str = "paper"
    skip_budget: int = 5
    max_rejections: int = 3  # consecutive rejected iterations before stopping (stochastic)
    master_seed: int | None = None  # default: scenario seed

    def __post_init__(self):
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError(f"backtrack factor must be in (0, 1), got {self.backtrack}")
        if not (0.0 < self.decrease_coeff < 1.0):
            raise ValueError(f"decrease coefficient must be in (0, 1), got {self.decrease_coeff}")
        if self.seed_policy not in ("common", "fresh"):
            raise ValueError(f"seed_policy must be 'common' or 'fresh', got {self.seed_policy!r}")


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    cost: CostBreakdown
    grad_norm: float
    step: float
    accepted: bool


@dataclass
class OptimizationHistory:
    records: list[IterationRecord]
    final: list[SegmentedTrajectory]
    stop_reason: str

    @property
    def accepted_totals(self) -> list[float]:
        return [r.cost.total for r in self.records if r.accepted]

    @property
    def final_cost(self) -> CostBreakdown:
        return self.records[-1].cost


@dataclass
class SegmentSearchResult:
    best_segments: int
    best: OptimizationHistory
    per_segment_count: dict[int, OptimizationHistory]
    cap_hit: bool


def _iteration_seeds(master: int, iteration: int, reps: int, salt: int = 0) -> list[int]:
    ss = np.random.SeedSequence([int(master) & 0x7FFFFFFF, salt, iteration])
    return [int(s) & 0x7FFFFFFF for s in ss.generate_state(reps)]


def armijo_step(
    theta: np.ndarray,
    grad: np.ndarray,
    evaluate: Callable[[np.ndarray], float],
    cfg: OptimizerConfig,
    j_current: float | None = None,
    step_init: float | None = None,
) -> tuple[np.ndarray, float, bool]:
    """Backtracking line search along -grad.

    Accepts the largest step nu in the schedule nu0 * backtrack^k with
    J(theta - nu grad) <= J(theta) - c nu |grad|^2. Returns the unchanged
    theta with accepted=False when every backtrack fails. step_init
    overrides the schedule start (the optimizer warm-starts it from the
    previously accepted step).
    """
    gnorm2 = float(grad @ grad)
    if not math.isfinite(gnorm2):
        raise ValueError("gradient is not finite")
    if gnorm2 == 0.0:
        return theta, 0.0, True
    j0 = evaluate(theta) if j_current is None else j_current

    def sufficient(j_cand: float, nu: float) -> bool:
        return j_cand <= j0 - cfg.decrease_coeff * nu * gnorm2

    nu = cfg.step_init if step_init is None else min(step_init, cfg.step_init)
    accepted_first = sufficient(evaluate(theta - nu * grad), nu)
    if accepted_first:
        # Walk back up the schedule while larger steps also qualify, so a
        # warm start cannot trap the search at a vanishing scale.
        while nu < cfg.step_init * (1.0 - 1e-12):
            bigger = min(nu / cfg.backtrack, cfg.step_init)
            if sufficient(evaluate(theta - bigger * grad), bigger):
                nu = bigger
            else:
                break
        return theta - nu * grad, nu, True
    for _ in range(cfg.max_backtracks - 1):
        nu *= cfg.backtrack
        if sufficient(evaluate(theta - nu * grad), nu):
            return theta - nu * grad, nu, True
    return theta, 0.0, False


def _mean_breakdown(costs: Sequence[CostBreakdown]) -> CostBreakdown:
    arr = np.array([[c.j1, c.j2, c.j3, c.jf, c.penalty, c.total] for c in costs])
    m = arr.mean(axis=0)
    return CostBreakdown(j1=m[0], j2=m[1], j3=m[2], jf=m[3], penalty=m[4], total=m[5])


def optimize(
    sc: Scenario,
    family: str,
    trajs_init: Sequence[SegmentedTrajectory],
    cfg: OptimizerConfig,
) -> OptimizationHistory:
    """Iterate simulate -> sensitivity propagation -> Armijo step.

    Deterministic given the scenario, initial parameters, and seeds. Stops
    on gradient tolerance, iteration budget, a rejected line search
    (immediately in deterministic scenarios, after max_rejections
    consecutive rejections otherwise), or an exhausted skip budget.
    """
    for traj in trajs_init:
        if traj.family != family:
            raise ValueError(f"trajectory family {traj.family!r} does not match requested {family!r}")
    deterministic = sc.is_deterministic()
    reps = 1 if deterministic else max(1, cfg.replications)
    master = sc.seed if cfg.master_seed is None else cfg.master_seed

    trajs = [normalize_orientation(t) for t in trajs_init]
    theta = flatten_all(trajs)
    records: list[IterationRecord] = []
    stop_reason = "max_iters"
    skips = 0
    rejections = 0
    fresh_counter = [0]
    nu_start = cfg.step_init

    def seeds_for(iteration: int) -> list[int]:
        if cfg.seed_policy == "fresh":
            fresh_counter[0] += 1
            return _iteration_seeds(master, fresh_counter[0], reps, salt=1)
        return _iteration_seeds(master, iteration, reps)

    def evaluate_with(seeds: list[int]) -> Callable[[np.ndarray], float]:
        def evaluate(vec: np.ndarray) -> float:
            try:
                cand = with_flat_all(trajs, vec)
                totals = [sample_cost(simulate(sc, cand, sd), sc).total for sd in seeds]
            except (DegenerateTrajectory, SimulationError, ValueError):
                return math.inf
            return float(np.mean(totals))

        return evaluate

    def full_eval(vec: np.ndarray, seeds: list[int]):
        cand = with_flat_all(trajs, vec)
        costs, grads = [], []
        for sd in seeds:
            trace = simulate(sc, cand, sd)
            costs.append(sample_cost(trace, sc))
            try:
                res = run_ipa(trace, mode=cfg.ipa_mode)
                grads.append(sample_gradient(trace, res, sc))
            except TangentialCrossing as exc:
                log.warning("replication seed %d skipped: %s", sd, exc)
        return costs, grads

    it = 0
    while it < cfg.max_iters:
        seeds = seeds_for(it)
        costs, grads = full_eval(theta, seeds)
        if not grads:
            skips += 1
            log.warning("iteration %d skipped: every replication crossed a guard tangentially", it)
            if deterministic or skips > cfg.skip_budget:
                stop_reason = "tangential_skip_budget"
                break
            it += 1
            continue
        cost = _mean_breakdown(costs)
        grad = np.mean(grads, axis=0)
        gnorm = float(np.linalg.norm(grad))
        if not math.isfinite(gnorm):
            skips += 1
            log.warning("iteration %d skipped: non-finite gradient", it)
            if deterministic or skips > cfg.skip_budget:
                stop_reason = "nonfinite_gradient"
                break
            it += 1
            continue
        if gnorm <= cfg.grad_tol:
            records.append(IterationRecord(it, theta.copy(), cost, gnorm, 0.0, True))
            stop_reason = "gradient_tolerance"
            break
        theta_next, nu, accepted = armijo_step(
            theta, grad, evaluate_with(seeds), cfg, j_current=cost.total, step_init=nu_start
        )
        records.append(IterationRecord(it, theta.copy(), cost, gnorm, nu, accepted))
        if accepted:
            rejections = 0
            nu_start = min(cfg.step_init, nu / cfg.backtrack)
            trajs = [normalize_orientation(t) for t in with_flat_all(trajs, theta_next)]
            theta = flatten_all(trajs)
        else:
            rejections += 1
            if deterministic or rejections >= cfg.max_rejections:
                stop_reason = "line_search_rejected"
                break
        it += 1

    # Final evaluation of the arrived-at parameters
    if stop_reason != "gradient_tolerance":
        seeds = seeds_for(it + 1)
        costs, grads = full_eval(theta, seeds)
        cost = _mean_breakdown(costs) if costs else CostBreakdown(0, 0, 0, 0, 0, math.nan)
        gnorm = float(np.linalg.norm(np.mean(grads, axis=0))) if grads else math.nan
        records.append(IterationRecord(len(records), theta.copy(), cost, gnorm, 0.0, True))
    return OptimizationHistory(records=records, final=with_flat_all(trajs, theta), stop_reason=stop_reason)


def segment_search(
    sc: Scenario,
    init_builder: Callable[[int], list[SegmentedTrajectory]],
    cfg: OptimizerConfig,
    max_segments: int = 4,
) -> SegmentSearchResult:
    """Outer search over the shared per-agent segment count.

    Optimizes with 1, 2, ... segments and stops as soon as the optimum
    with E segments is no better than the optimum with E-1.
    """
    per: dict[int, OptimizationHistory] = {}
    prev_cost = math.inf
    best_e = 1
    for e in range(1, max_segments + 1):
        hist = optimize(sc, "ellipse", init_builder(e), cfg)
        per[e] = hist
        cost_e = hist.final_cost.total
        log.info("segment search: E=%d gives J=%.6g", e, cost_e)
        if e > 1 and cost_e >= prev_cost:
            return SegmentSearchResult(best_segments=e - 1, best=per[e - 1], per_segment_count=per, cap_hit=False)
        prev_cost = cost_e
        best_e = e
    return SegmentSearchResult(best_segments=best_e, best=per[best_e], per_segment_count=per, cap_hit=True)


def default_trajectories(
    sc: Scenario,
    family: str | None = None,
    segments: int | None = None,
    harmonics: int | None = None,
    radius: float | None = None,
) -> list[SegmentedTrajectory]:
    """Deterministic initial guesses: circles through the base, one per
    agent, fanned toward the target centroid and perturbed per agent.

    The default radius is a quarter of the longer mission extent; results
    are sensitive to it, so callers may pass a layout-aware value.
    """
    family = family or sc.family
    segments = segments if segments is not None else sc.segments
    harmonics = harmonics if harmonics is not None else sc.harmonics
    statics = sc.statics()
    centroid = statics.target_pos.mean(axis=0)
    if radius is None:
        radius = max(sc.l1, sc.l2) / 4.0
    to_centroid = centroid - statics.base
    norm = float(np.hypot(*to_centroid))
    base_angle = math.atan2(to_centroid[1], to_centroid[0]) if norm > 1e-9 else 0.0

    out = []
    for j in range(sc.n_agents):
        # Fan agents around the centroid direction
        angle = base_angle + (2.0 * math.pi * j) / max(sc.n_agents, 1)
        direction = np.array([math.cos(angle), math.sin(angle)])
        if family == "ellipse":
            segs = []
            for k in range(segments):
                r_k = radius * (1.0 + 0.05 * k)
                center = statics.base + r_k * direction
                segs.append(EllipseParams(cx=float(center[0]), cy=float(center[1]), a=r_k, b=r_k, phi=0.0))
            out.append(SegmentedTrajectory(family="ellipse", segments=tuple(segs)))
        else:
            # One-harmonic circle through the base: amplitudes R with a
            # quarter-turn phase split; the anchor constraint recenters it.
            phx = math.atan2(-direction[0], direction[1])
            amps_x = np.zeros(harmonics)
            amps_y = np.zeros(harmonics)
            phases_x = np.zeros(harmonics)
            phases_y = np.zeros(harmonics)
            amps_x[0] = radius
            amps_y[0] = radius
            phases_x[0] = phx
            phases_y[0] = phx - 0.5 * math.pi
            params = FourierParams(
                fx=1.0,
                amps_x=amps_x,
                amps_y=amps_y,
                phases_x=phases_x,
                phases_y=phases_y,
                anchor=statics.base.copy(),
            )
            out.append(SegmentedTrajectory(family="fourier", segments=(params,)))
    return out
