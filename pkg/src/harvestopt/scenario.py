"""Problem instance: mission geometry, targets, rates, weights, and config I/O.

A scenario is immutable after construction and safe to share across
concurrent simulation runs. Configs are JSON text following the schema
documented in :func:`load_scenario`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

DEFAULT_STEP = 1e-3
DEFAULT_EVENT_TOL = 1e-9
DEFAULT_CONSTRAINT_WEIGHT = 1e3
DEFAULT_RESAMPLE_INTERVAL = 1.0
DEFAULT_HARMONICS = 5


class ScenarioFormatError(Exception):
    """Config text does not parse against the schema. Names the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ScenarioValidationError(Exception):
    """Scenario fields violate an invariant. Carries the violation list."""

    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        super().__init__("; ".join(f"[{v.code}] {v.message}" for v in violations))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class ArrivalProcess:
    """Data generation process at one target.

    kind: "constant" (fixed rate), "uniform" (rate redrawn from U[lo,hi]
    every `resample` time units), or "piecewise" (given (time, rate)
    breakpoints). Redraw instants and breakpoints are the exogenous
    rate-jump times of the process.
    """

    kind: str
    rate: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    resample: float = DEFAULT_RESAMPLE_INTERVAL
    breakpoints: tuple[tuple[float, float], ...] = ()

    def mean_rate(self) -> float:
        if self.kind == "constant":
            return self.rate
        if self.kind == "uniform":
            return 0.5 * (self.lo + self.hi)
        return float(np.mean([r for _, r in self.breakpoints])) if self.breakpoints else 0.0

    def is_deterministic(self) -> bool:
        return self.kind != "uniform"


@dataclass(frozen=True)
class ArrivalSchedule:
    """One realized sample path of an arrival process: piecewise-constant rate.

    times[0] == 0; rates[k] holds on [times[k], times[k+1]).
    """

    times: np.ndarray
    rates: np.ndarray

    def rate_at(self, t: float) -> float:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.rates[k])

    def integral(self, t: float) -> float:
        """Exact integral of the rate over [0, t]."""
        total = 0.0
        for k in range(len(self.times)):
            t0 = self.times[k]
            if t0 >= t:
                break
            t1 = self.times[k + 1] if k + 1 < len(self.times) else np.inf
            total += self.rates[k] * (min(t1, t) - t0)
        return total

    def jump_times(self, horizon: float) -> np.ndarray:
        ts = self.times[1:]
        return np.asarray(ts[ts < horizon], dtype=float)


def realize_arrivals(proc: ArrivalProcess, horizon: float, rng: np.random.Generator) -> ArrivalSchedule:
    """Draw one rate sample path over [0, horizon]."""
    if proc.kind == "constant":
        return ArrivalSchedule(np.array([0.0]), np.array([proc.rate]))
    if proc.kind == "uniform":
        n = int(np.ceil(horizon / proc.resample))
        times = np.arange(n) * proc.resample
        rates = rng.uniform(proc.lo, proc.hi, size=n)
        return ArrivalSchedule(times, rates)
    if proc.kind == "piecewise":
        times = np.array([t for t, _ in proc.breakpoints], dtype=float)
        rates = np.array([r for _, r in proc.breakpoints], dtype=float)
        if times[0] != 0.0:
            times = np.concatenate([[0.0], times])
            rates = np.concatenate([[rates[0]], rates])
        return ArrivalSchedule(times, rates)
    raise ScenarioFormatError("arrival.kind", f"unknown kind {proc.kind!r}")


@dataclass(frozen=True)
class Target:
    """Stationary data source."""

    index: int
    position: np.ndarray  # shape (2,)
    weight: float
    arrival: ArrivalProcess


@dataclass(frozen=True)
class StaticParams:
    """Everything the gradient machinery needs, with no arrival-process access.

    Sensitivity computations must read arrival rates only through values
    recorded at event times, so this view deliberately excludes the
    generators.
    """

    l1: float
    l2: float
    target_pos: np.ndarray  # (M, 2)
    q: np.ndarray  # (M,)
    base: np.ndarray  # (2,)
    n_agents: int
    mu: np.ndarray  # (M, N)
    beta: np.ndarray  # (M, N)
    r: np.ndarray  # (M, N)
    r_base: np.ndarray  # (N,)
    alpha: float
    m_idle: float
    m_constraint: float
    horizon: float
    step: float
    event_tol: float

    @property
    def n_targets(self) -> int:
        return int(self.target_pos.shape[0])


@dataclass(frozen=True)
class Scenario:
    """Immutable problem instance."""

    l1: float
    l2: float
    targets: tuple[Target, ...]
    base: np.ndarray
    n_agents: int
    family: str  # "ellipse" | "fourier"
    segments: int  # trajectory segments per agent (ellipse family)
    harmonics: int  # Fourier harmonic count used for default initializations
    mu: np.ndarray  # (M, N) max collection rates
    beta: np.ndarray  # (M, N) max delivery rates
    r: np.ndarray  # (M, N) collection ranges
    r_base: np.ndarray  # (N,) delivery ranges
    alpha: float
    m_idle: float
    m_constraint: float
    horizon: float
    step: float = DEFAULT_STEP
    event_tol: float = DEFAULT_EVENT_TOL
    seed: int = 0

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def statics(self) -> StaticParams:
        return StaticParams(
            l1=self.l1,
            l2=self.l2,
            target_pos=np.array([t.position for t in self.targets], dtype=float).reshape(-1, 2),
            q=np.array([t.weight for t in self.targets], dtype=float),
            base=np.asarray(self.base, dtype=float),
            n_agents=self.n_agents,
            mu=self.mu,
            beta=self.beta,
            r=self.r,
            r_base=self.r_base,
            alpha=self.alpha,
            m_idle=self.m_idle,
            m_constraint=self.m_constraint,
            horizon=self.horizon,
            step=self.step,
            event_tol=self.event_tol,
        )

    def is_deterministic(self) -> bool:
        return all(t.arrival.is_deterministic() for t in self.targets)

    def with_overrides(self, **kwargs) -> "Scenario":
        return replace(self, **kwargs)


def _pair_matrix(value: Any, m: int, n: int, key: str) -> np.ndarray:
    """Accept a scalar (global value) or an MxN nested list."""
    if isinstance(value, (int, float)):
        return np.full((m, n), float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (m, n):
        raise ScenarioFormatError(key, f"expected scalar or {m}x{n} matrix, got shape {arr.shape}")
    return arr


def _agent_vector(value: Any, n: int, key: str) -> np.ndarray:
    if isinstance(value, (int, float)):
        return np.full(n, float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ScenarioFormatError(key, f"expected scalar or length-{n} list, got shape {arr.shape}")
    return arr


def _require(section: dict, key: str, path: str) -> Any:
    if key not in section:
        raise ScenarioFormatError(f"{path}.{key}", "missing required key")
    return section[key]


def _parse_arrival(spec: dict, path: str) -> ArrivalProcess:
    kind = _require(spec, "kind", path)
    if kind == "constant":
        return ArrivalProcess(kind="constant", rate=float(_require(spec, "rate", path)))
    if kind == "uniform":
        return ArrivalProcess(
            kind="uniform",
            lo=float(_require(spec, "lo", path)),
            hi=float(_require(spec, "hi", path)),
            resample=float(spec.get("resample", DEFAULT_RESAMPLE_INTERVAL)),
        )
    if kind == "piecewise":
        bps = _require(spec, "breakpoints", path)
        try:
            parsed = tuple((float(t), float(r)) for t, r in bps)
        except (TypeError, ValueError) as exc:
            raise ScenarioFormatError(f"{path}.breakpoints", f"expected [time, rate] pairs: {exc}")
        return ArrivalProcess(kind="piecewise", breakpoints=parsed)
    raise ScenarioFormatError(f"{path}.kind", f"unknown arrival kind {kind!r}")


def load_scenario(config_text: str) -> Scenario:
    """Parse and validate a scenario config.

    Schema (JSON):
      mission{l1,l2}  base{x,y}
      targets[{x,y,q,arrival{kind,...}}]
      agents{count,family,segments,harmonics}
      rates{mu,beta}  ranges{r,r_base}
      weights{alpha,m_idle,m_constraint}
      sim{horizon,step,event_tol,seed}
    rates/ranges entries may be global scalars or per-pair matrices.
    """
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError("<root>", f"not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ScenarioFormatError("<root>", "top level must be an object")

    mission = _require(raw, "mission", "<root>")
    base_spec = _require(raw, "base", "<root>")
    target_specs = _require(raw, "targets", "<root>")
    agents = _require(raw, "agents", "<root>")
    rates = _require(raw, "rates", "<root>")
    ranges = _require(raw, "ranges", "<root>")
    weights = _require(raw, "weights", "<root>")
    sim = _require(raw, "sim", "<root>")

    l1 = float(_require(mission, "l1", "mission"))
    l2 = float(_require(mission, "l2", "mission"))
    base = np.array([float(_require(base_spec, "x", "base")), float(_require(base_spec, "y", "base"))])

    targets = []
    for i, tspec in enumerate(target_specs):
        path = f"targets[{i}]"
        targets.append(
            Target(
                index=i,
                position=np.array([float(_require(tspec, "x", path)), float(_require(tspec, "y", path))]),
                weight=float(tspec.get("q", 1.0)),
                arrival=_parse_arrival(_require(tspec, "arrival", path), f"{path}.arrival"),
            )
        )

    n = int(_require(agents, "count", "agents"))
    m = len(targets)
    if m < 1:
        raise ScenarioValidationError([Violation("NoTargets", "M must be >= 1")])
    if n < 1:
        raise ScenarioValidationError([Violation("NoAgents", "agent count must be >= 1")])

    sc = Scenario(
        l1=l1,
        l2=l2,
        targets=tuple(targets),
        base=base,
        n_agents=n,
        family=str(agents.get("family", "ellipse")),
        segments=int(agents.get("segments", 1)),
        harmonics=int(agents.get("harmonics", DEFAULT_HARMONICS)),
        mu=_pair_matrix(_require(rates, "mu", "rates"), m, n, "rates.mu"),
        beta=_pair_matrix(_require(rates, "beta", "rates"), m, n, "rates.beta"),
        r=_pair_matrix(_require(ranges, "r", "ranges"), m, n, "ranges.r"),
        r_base=_agent_vector(_require(ranges, "r_base", "ranges"), n, "ranges.r_base"),
        alpha=float(_require(weights, "alpha", "weights")),
        m_idle=float(weights.get("m_idle", 0.0)),
        m_constraint=float(weights.get("m_constraint", DEFAULT_CONSTRAINT_WEIGHT)),
        horizon=float(_require(sim, "horizon", "sim")),
        step=float(sim.get("step", DEFAULT_STEP)),
        event_tol=float(sim.get("event_tol", DEFAULT_EVENT_TOL)),
        seed=int(sim.get("seed", 0)),
    )
    violations = validate_scenario(sc)
    if violations:
        raise ScenarioValidationError(violations)
    return sc


def validate_scenario(sc: Scenario) -> list[Violation]:
    """Check every scenario invariant. Empty list means valid."""
    out: list[Violation] = []
    if sc.n_targets < 1:
        out.append(Violation("NoTargets", "M must be >= 1"))
    if sc.n_agents < 1:
        out.append(Violation("NoAgents", "agent count must be >= 1"))
    if sc.l1 <= 0 or sc.l2 <= 0:
        out.append(Violation("NonpositiveExtent", f"mission extents must be positive, got ({sc.l1}, {sc.l2})"))
    if not (0.0 <= sc.alpha <= 1.0):
        out.append(Violation("WeightOutOfRange", f"alpha must be in [0, 1], got {sc.alpha}"))
    if sc.m_idle < 0:
        out.append(Violation("NegativeWeight", f"m_idle must be >= 0, got {sc.m_idle}"))
    if sc.m_constraint < 0:
        out.append(Violation("NegativeWeight", f"m_constraint must be >= 0, got {sc.m_constraint}"))
    if sc.horizon <= 0:
        out.append(Violation("NonpositiveHorizon", f"horizon must be positive, got {sc.horizon}"))
    if sc.step <= 0:
        out.append(Violation("NonpositiveStep", f"integrator step must be positive, got {sc.step}"))
    if sc.event_tol <= 0:
        out.append(Violation("NonpositiveEventTol", f"event tolerance must be positive, got {sc.event_tol}"))
    if sc.family not in ("ellipse", "fourier"):
        out.append(Violation("UnknownFamily", f"trajectory family must be ellipse or fourier, got {sc.family!r}"))
    if sc.segments < 1:
        out.append(Violation("NoSegments", f"segments per agent must be >= 1, got {sc.segments}"))

    if np.any(sc.mu <= 0):
        out.append(Violation("NonpositiveRate", "all collection rates mu must be positive"))
    if np.any(sc.beta <= 0):
        out.append(Violation("NonpositiveRate", "all delivery rates beta must be positive"))
    if np.any(sc.r <= 0):
        out.append(Violation("NonpositiveRange", "all collection ranges must be positive"))
    if np.any(sc.r_base <= 0):
        out.append(Violation("NonpositiveRange", "all base ranges must be positive"))

    if not (0.0 <= sc.base[0] <= sc.l1 and 0.0 <= sc.base[1] <= sc.l2):
        out.append(Violation("BaseOutsideMission", f"base {sc.base.tolist()} outside mission rectangle"))

    for t in sc.targets:
        x, y = float(t.position[0]), float(t.position[1])
        if not (0.0 <= x <= sc.l1 and 0.0 <= y <= sc.l2):
            out.append(Violation("TargetOutsideMission", f"target {t.index} at ({x}, {y}) outside mission rectangle"))
        if t.weight < 0:
            out.append(Violation("NegativeTargetWeight", f"target {t.index} weight must be >= 0, got {t.weight}"))
        out.extend(_validate_arrival(t.arrival, t.index))
        # Collection and delivery regions must not overlap: an agent can
        # never collect and deliver at the same time.
        d = float(np.hypot(*(t.position - sc.base)))
        for j in range(sc.n_agents):
            if d <= sc.r[t.index, j] + sc.r_base[j]:
                out.append(
                    Violation(
                        "TargetBaseRangeOverlap",
                        f"target {t.index} is within combined collection+delivery range of the base "
                        f"for agent {j} (distance {d:.6g} <= {sc.r[t.index, j]} + {sc.r_base[j]})",
                    )
                )
                break
    return out


def _validate_arrival(proc: ArrivalProcess, index: int) -> list[Violation]:
    out = []
    if proc.kind == "constant":
        if proc.rate < 0:
            out.append(Violation("NegativeArrivalRate", f"target {index}: rate must be >= 0"))
    elif proc.kind == "uniform":
        if proc.lo < 0 or proc.hi < 0:
            out.append(Violation("NegativeArrivalRate", f"target {index}: uniform bounds must be >= 0"))
        if proc.lo > proc.hi:
            out.append(Violation("ArrivalBoundsInverted", f"target {index}: lo {proc.lo} > hi {proc.hi}"))
        if proc.resample <= 0:
            out.append(Violation("NonpositiveResample", f"target {index}: resample interval must be positive"))
    elif proc.kind == "piecewise":
        times = [t for t, _ in proc.breakpoints]
        if any(r < 0 for _, r in proc.breakpoints):
            out.append(Violation("NegativeArrivalRate", f"target {index}: breakpoint rates must be >= 0"))
        if any(t1 >= t2 for t1, t2 in zip(times, times[1:])):
            out.append(Violation("BreakpointsNotIncreasing", f"target {index}: breakpoint times must strictly increase"))
        if not proc.breakpoints:
            out.append(Violation("EmptyBreakpoints", f"target {index}: piecewise arrival needs breakpoints"))
    else:
        out.append(Violation("UnknownArrivalKind", f"target {index}: unknown kind {proc.kind!r}"))
    return out


def _arrival_to_dict(proc: ArrivalProcess) -> dict:
    if proc.kind == "constant":
        return {"kind": "constant", "rate": proc.rate}
    if proc.kind == "uniform":
        return {"kind": "uniform", "lo": proc.lo, "hi": proc.hi, "resample": proc.resample}
    return {"kind": "piecewise", "breakpoints": [[t, r] for t, r in proc.breakpoints]}


def _compact(mat: np.ndarray) -> Any:
    """Collapse a constant matrix/vector back to its scalar form."""
    flat = np.asarray(mat).ravel()
    if np.all(flat == flat[0]):
        return float(flat[0])
    return np.asarray(mat).tolist()


def export_scenario(sc: Scenario) -> str:
    """Serialize to config text; load_scenario(export_scenario(sc)) == sc."""
    doc = {
        "mission": {"l1": sc.l1, "l2": sc.l2},
        "base": {"x": float(sc.base[0]), "y": float(sc.base[1])},
        "targets": [
            {
                "x": float(t.position[0]),
                "y": float(t.position[1]),
                "q": t.weight,
                "arrival": _arrival_to_dict(t.arrival),
            }
            for t in sc.targets
        ],
        "agents": {
            "count": sc.n_agents,
            "family": sc.family,
            "segments": sc.segments,
            "harmonics": sc.harmonics,
        },
        "rates": {"mu": _compact(sc.mu), "beta": _compact(sc.beta)},
        "ranges": {"r": _compact(sc.r), "r_base": _compact(sc.r_base)},
        "weights": {"alpha": sc.alpha, "m_idle": sc.m_idle, "m_constraint": sc.m_constraint},
        "sim": {
            "horizon": sc.horizon,
            "step": sc.step,
            "event_tol": sc.event_tol,
            "seed": sc.seed,
        },
    }
    return json.dumps(doc, indent=2)


def replication_rng(master_seed: int, *counters: int) -> np.random.Generator:
    """Counter-based seed split: independent stream per (seed, counters...)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & 0x7FFFFFFF, *[int(c) for c in counters]]))
