"""Event-driven integration of the harvesting hybrid system over [0, T].

Fixed-step RK4 advances the continuous state (queues and trajectory
phases) inside a mode; guard sign changes across a step are localized by
bisection, the earliest event is committed, discrete mode updates are
applied, and integration resumes. Exogenous arrival-rate jumps are
scheduled grid points, never bisected.

Inside a fixed mode the queue rates are explicit functions of the agent
phases, so the hot path runs on a mode-specialized stepper with packed
per-segment trajectory constants; `flowdyn.queue_flow_rates` states the
same dynamics as the public contract and the two are tested against each
other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flowdyn import ConnectionMap, HybridState, base_distances, pair_distances
from .scenario import ArrivalSchedule, Scenario, StaticParams, realize_arrivals, replication_rng
from .trajectory import TWO_PI, EllipseParams, SegmentedTrajectory

log = logging.getLogger(__name__)

# Kinds, in the fixed processing order used when several events collapse
# onto one instant: queue events first so jump formulas see consistent
# modes, connection changes next, scheduled rate jumps last.
KIND_ORDER = (
    "onboard_empty",  # an onboard queue Z_ij hits 0
    "target_empty",  # a target queue X_i hits 0
    "target_fill",  # a target queue X_i leaves 0
    "range_enter",  # D_ij drops to the collection range
    "range_exit",  # D_ij leaves the collection range
    "base_enter",  # D_Bj drops to the delivery range
    "base_exit",  # D_Bj leaves the delivery range
    "rate_jump",  # scheduled jump of an arrival rate
)
_KIND_RANK = {k: idx for idx, k in enumerate(KIND_ORDER)}


class SimulationError(Exception):
    """Integration failed; message carries the failure time."""


@dataclass(frozen=True)
class Snapshot:
    """Dynamic state frozen at one instant."""

    t: float
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    rho: np.ndarray
    seg: np.ndarray
    pos: np.ndarray
    sigma: np.ndarray


@dataclass
class EventRecord:
    index: int
    time: float
    kind: str
    i: int  # target index, -1 if not applicable
    j: int  # agent index, -1 if not applicable
    endogenous: bool
    cause: str  # "guard" | "arrival" | "switch" | "induced"
    handover_to: int | None
    pre: Snapshot
    post: Snapshot


@dataclass
class Break:
    """One instant where the mode changes; closes a ModeInterval."""

    time: float
    sample_pre: int
    sample_post: int
    switch_agent: int | None  # agent whose trajectory segment advanced, if any
    records: list[EventRecord]


@dataclass
class ModeInterval:
    """Open interval between breaks with frozen discrete state."""

    t0: float
    t1: float
    i0: int  # first sample index (node shared with the previous interval)
    i1: int  # last sample index
    target_agent: np.ndarray  # (M,)
    at_base: np.ndarray  # (N,) bool
    x_empty: np.ndarray  # (M,) bool: target queue pinned at zero
    z_positive: np.ndarray  # (M, N) bool: onboard queue strictly positive
    sigma: np.ndarray  # (M,) arrival rates in effect
    in_range: np.ndarray  # (M, N) bool


@dataclass
class Trace:
    """Full record of one simulated sample path."""

    times: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    rho: np.ndarray
    seg: np.ndarray
    pos: np.ndarray
    sigma: np.ndarray
    events: list[EventRecord]
    breaks: list[Break]
    intervals: list[ModeInterval]
    schedules: list[ArrivalSchedule]
    trajectories: list[SegmentedTrajectory]
    statics: StaticParams
    seed: int
    warnings: list[str] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.times)

    def arrival_integrals(self, t: float) -> np.ndarray:
        """Exact per-target cumulative arrivals over [0, t]."""
        return np.array([s.integral(t) for s in self.schedules])

    def conservation_residual(self) -> np.ndarray:
        """(n, M) |X + sum_j Z + Y - integral of sigma| at every sample."""
        inflow = np.stack([np.array([s.integral(t) for s in self.schedules]) for t in self.times])
        held = self.X + self.Z.sum(axis=2) + self.Y
        return np.abs(held - inflow)


@dataclass
class _Mode:
    """Discrete state maintained by the simulator."""

    target_agent: np.ndarray
    in_range: np.ndarray  # (M, N) bool
    at_base: np.ndarray  # (N,) bool
    x_empty: np.ndarray  # (M,) bool
    z_positive: np.ndarray  # (M, N) bool

    def conn(self) -> ConnectionMap:
        return ConnectionMap(self.target_agent, self.at_base)

    def copy(self) -> "_Mode":
        return _Mode(
            self.target_agent.copy(),
            self.in_range.copy(),
            self.at_base.copy(),
            self.x_empty.copy(),
            self.z_positive.copy(),
        )


# ---------------------------------------------------------------------------
# Mode-specialized stepper


def _pack_segment(params):
    if isinstance(params, EllipseParams):
        return (0, params.cx, params.cy, params.a, params.b, math.cos(params.phi), math.sin(params.phi))
    a0, b0 = params.zero_terms()
    cxv = TWO_PI * np.arange(1, params.gamma_x + 1) * params.fx
    cyv = TWO_PI * np.arange(1, params.gamma_y + 1)
    return (
        1,
        a0,
        b0,
        cxv,
        cyv,
        params.phases_x.copy(),
        params.phases_y.copy(),
        params.amps_x.copy(),
        params.amps_y.copy(),
        params.amps_x * cxv,
        params.amps_y * cyv,
    )


def _pos_tan(pk, rho: float):
    """Position and curve tangent of one packed segment at phase rho."""
    if pk[0] == 0:
        cr, sr = math.cos(rho), math.sin(rho)
        acr, asr = pk[3] * cr, pk[3] * sr
        bcr, bsr = pk[4] * cr, pk[4] * sr
        return (
            pk[1] + acr * pk[5] - bsr * pk[6],
            pk[2] + acr * pk[6] + bsr * pk[5],
            -asr * pk[5] - bcr * pk[6],
            -asr * pk[6] + bcr * pk[5],
        )
    argx = pk[3] * rho + pk[5]
    argy = pk[4] * rho + pk[6]
    sx = pk[1] + float(np.sin(argx) @ pk[7])
    sy = pk[2] + float(np.sin(argy) @ pk[8])
    gx = float(np.cos(argx) @ pk[9])
    gy = float(np.cos(argy) @ pk[10])
    return sx, sy, gx, gy


class _Stepper:
    """RK4 integrator specialized to one discrete mode.

    Under a frozen mode the queue rates depend on time only through the
    agent phases, and each phase is an independent scalar ODE.
    """

    def __init__(self, statics: StaticParams, trajs: Sequence[SegmentedTrajectory]):
        self.statics = statics
        self.m, self.n = statics.n_targets, statics.n_agents
        self.wx = statics.target_pos[:, 0].copy()
        self.wy = statics.target_pos[:, 1].copy()
        self.bx, self.by = float(statics.base[0]), float(statics.base[1])
        self.packs = [[_pack_segment(p) for p in traj.segments] for traj in trajs]
        self.n_segs = [traj.n_segments for traj in trajs]
        self.trajs = list(trajs)

    def set_mode(self, mode: _Mode, sigma: np.ndarray, seg: np.ndarray) -> None:
        st = self.statics
        self.sigma = sigma
        self.pk = [self.packs[j][seg[j]] for j in range(self.n)]
        # Connected pairs: (i, j, mu, r, wx, wy, empty, sigma_i)
        self.conn_pairs = [
            (i, int(mode.target_agent[i]), st.mu[i, mode.target_agent[i]], st.r[i, mode.target_agent[i]],
             self.wx[i], self.wy[i], bool(mode.x_empty[i]), float(sigma[i]))
            for i in range(self.m)
            if mode.target_agent[i] >= 0
        ]
        # Delivery columns: (j, r_base, beta[:, j] * 1[Z > 0])
        self.deliver = [
            (j, st.r_base[j], st.beta[:, j] * mode.z_positive[:, j])
            for j in range(self.n)
            if mode.at_base[j] and np.any(mode.z_positive[:, j])
        ]
        self.mode = mode

    def rhodot(self, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(posx, posy, rho_dot) at the given phases."""
        n = self.n
        px = np.empty(n)
        py = np.empty(n)
        rd = np.empty(n)
        for j in range(n):
            sx, sy, gx, gy = _pos_tan(self.pk[j], float(rho[j]))
            px[j] = sx
            py[j] = sy
            norm = math.hypot(gx, gy)
            if norm < 1e-9:
                from .trajectory import DegenerateTrajectory

                raise DegenerateTrajectory(f"|ds/drho| = {norm:.3e} for agent {j}")
            rd[j] = 1.0 / norm
        return px, py, rd

    def rates(self, rho: np.ndarray):
        """(xd, zd, yd, rd, px, py) for the frozen mode at phases rho."""
        px, py, rd = self.rhodot(rho)
        xd = self.sigma.copy()
        zd = np.zeros((self.m, self.n))
        for i, j, mu, r, wxi, wyi, empty, sig in self.conn_pairs:
            d = math.hypot(wxi - px[j], wyi - py[j])
            p = 1.0 - d / r
            if p < 0.0:
                p = 0.0
            mup = mu * p
            if empty:
                xd[i] = 0.0 if sig <= mup else sig - mup
                zd[i, j] = sig if sig <= mup else mup
            else:
                xd[i] = sig - mup
                zd[i, j] = mup
        if self.deliver:
            yd = np.zeros(self.m)
            for j, rb, coef in self.deliver:
                pb = 1.0 - math.hypot(self.bx - px[j], self.by - py[j]) / rb
                if pb > 0.0:
                    out = coef * pb
                    zd[:, j] -= out
                    yd += out
        else:
            yd = np.zeros(self.m)
        return xd, zd, yd, rd, px, py

    def rk4(self, X, Z, Y, rho, dt: float):
        """One step; returns (X', Z', Y', rho', posx, posy) at t + dt."""
        k1 = self.rates(rho)
        k2 = self.rates(rho + 0.5 * dt * k1[3])
        k3 = self.rates(rho + 0.5 * dt * k2[3])
        k4 = self.rates(rho + dt * k3[3])
        w = dt / 6.0
        Xn = X + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Zn = Z + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Yn = Y + w * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        rn = rho + w * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        px, py, _ = self.rhodot(rn)
        return Xn, Zn, Yn, rn, px, py

    def positions(self, rho: np.ndarray):
        px, py, _ = self.rhodot(rho)
        return px, py


# ---------------------------------------------------------------------------
# Public single-step operations


def _mode_from_state(state: HybridState, conn: ConnectionMap, statics) -> _Mode:
    dist = pair_distances(statics.target_pos, state.pos)
    mup = _connected_mup(state.pos, conn.target_agent, statics)
    return _Mode(
        target_agent=conn.target_agent.copy(),
        in_range=dist <= statics.r,
        at_base=conn.base.copy(),
        x_empty=(state.X <= 0.0) & (state.sigma <= mup),
        z_positive=state.Z > 0.0,
    )


def _connected_mup(pos, target_agent, statics) -> np.ndarray:
    """(M,) collection rate mu_ij P_ij of each target's connected agent."""
    m = statics.n_targets
    out = np.zeros(m)
    ti = np.nonzero(target_agent >= 0)[0]
    if ti.size:
        ja = target_agent[ti]
        diff = statics.target_pos[ti] - pos[ja]
        d = np.sqrt(np.sum(diff * diff, axis=1))
        p = np.maximum(0.0, 1.0 - d / statics.r[ti, ja])
        out[ti] = statics.mu[ti, ja] * p
    return out


def advance(state: HybridState, conn: ConnectionMap, statics, trajs, h: float, mode: _Mode | None = None) -> HybridState:
    """Advance the continuous state by h assuming no event inside (t, t+h).

    Queue values within the event tolerance below zero are clamped to 0.
    """
    if mode is None:
        mode = _mode_from_state(state, conn, statics)
    stepper = _Stepper(statics, trajs)
    stepper.set_mode(mode, state.sigma, state.seg)
    Xn, Zn, Yn, rn, px, py = stepper.rk4(state.X, state.Z, state.Y, state.rho, h)
    tol = statics.event_tol
    Xn[(Xn < 0) & (Xn > -tol)] = 0.0
    Zn[(Zn < 0) & (Zn > -tol)] = 0.0
    return HybridState(
        t=state.t + h,
        X=Xn,
        Z=Zn,
        Y=Yn,
        pos=np.stack([px, py], axis=1),
        rho=rn,
        seg=state.seg.copy(),
        sigma=state.sigma.copy(),
    )


@dataclass
class _Crossing:
    kind: str
    i: int
    j: int
    dt: float  # localized offset from the step start


def detect_and_localize(state: HybridState, trial: HybridState, statics, trajs, conn: ConnectionMap, mode: _Mode | None = None):
    """Earliest guard crossing in (t, t+h], or None.

    Guards: target/onboard queues hitting zero, an empty target queue's net
    inflow turning positive, collection/delivery range boundaries, and
    (multi-segment trajectories) phase completing a revolution.
    """
    if mode is None:
        mode = _mode_from_state(state, conn, statics)
    stepper = _Stepper(statics, trajs)
    stepper.set_mode(mode, state.sigma, state.seg)
    h = trial.t - state.t
    trial_arrays = (trial.X, trial.Z, trial.rho, trial.pos[:, 0], trial.pos[:, 1])
    crossings = _find_crossings(stepper, state.X, state.Z, state.rho, trial_arrays, h, mode)
    if not crossings:
        return None
    return min(crossings, key=lambda c: (c.dt, _KIND_RANK.get(c.kind, 9)))


def _find_crossings(stepper: _Stepper, X, Z, rho, trial, h: float, mode: _Mode) -> list[_Crossing]:
    """All guard crossings across one trial step, each bisected in time."""
    st = stepper.statics
    m, n = stepper.m, stepper.n
    tol = st.event_tol
    trial_X, trial_Z, trial_rho, trial_px, trial_py = trial
    found: list[_Crossing] = []

    probe_cache: dict[float, tuple] = {}

    def probe(dt):
        got = probe_cache.get(dt)
        if got is None:
            got = stepper.rk4(X, Z, np.zeros(m), rho, dt)
            probe_cache[dt] = got
        return got

    def bisect(guard, g_end):
        lo, hi = 0.0, h
        want_neg = g_end <= 0.0
        for _ in range(64):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            if (guard(mid) <= 0.0) == want_neg:
                hi = mid
            else:
                lo = mid
        return hi

    # Queue guards: a target queue can drain only while connected, an
    # onboard queue only while delivering.
    for i, j, mu, r, wxi, wyi, empty, sig in stepper.conn_pairs:
        if not empty and X[i] > 0.0 and trial_X[i] <= 0.0:
            dt = bisect(lambda dt, i=i: probe(dt)[0][i], trial_X[i])
            found.append(_Crossing("target_empty", i, j, dt))
        if empty:

            def fill_guard(dt, j=j, mu=mu, r=r, wxi=wxi, wyi=wyi, sig=sig):
                out = probe(dt)
                d = math.hypot(wxi - out[4][j], wyi - out[5][j])
                return sig - mu * max(0.0, 1.0 - d / r)

            g1 = sig - mu * max(0.0, 1.0 - math.hypot(wxi - trial_px[j], wyi - trial_py[j]) / r)
            if g1 > 0.0:
                dt = bisect(fill_guard, 1.0)
                found.append(_Crossing("target_fill", i, j, dt))
    for j, rb, coef in stepper.deliver:
        for i in range(m):
            if coef[i] > 0.0 and Z[i, j] > 0.0 and trial_Z[i, j] <= 0.0:
                dt = bisect(lambda dt, i=i, j=j: probe(dt)[1][i, j], trial_Z[i, j])
                found.append(_Crossing("onboard_empty", i, j, dt))

    # Range guards against the recorded side
    for j in range(n):
        for i in range(m):
            g1 = math.hypot(stepper.wx[i] - trial_px[j], stepper.wy[i] - trial_py[j]) - st.r[i, j]
            inside = mode.in_range[i, j]
            if (not inside and g1 <= 0.0) or (inside and g1 > 0.0):

                def range_guard(dt, i=i, j=j):
                    out = probe(dt)
                    return math.hypot(stepper.wx[i] - out[4][j], stepper.wy[i] - out[5][j]) - st.r[i, j]

                dt = bisect(range_guard, g1)
                found.append(_Crossing("range_enter" if not inside else "range_exit", i, j, dt))

        g1 = math.hypot(stepper.bx - trial_px[j], stepper.by - trial_py[j]) - st.r_base[j]
        inside = mode.at_base[j]
        if (not inside and g1 <= 0.0) or (inside and g1 > 0.0):

            def base_guard(dt, j=j):
                out = probe(dt)
                return math.hypot(stepper.bx - out[4][j], stepper.by - out[5][j]) - st.r_base[j]

            dt = bisect(base_guard, g1)
            found.append(_Crossing("base_enter" if not inside else "base_exit", -1, j, dt))

        # Phase completing a revolution: advance to the next segment, or
        # restart an open (Fourier) curve from its anchor. A final ellipse
        # segment closes exactly, so its phase is left to run on.
        last = stepper.pk[j] is stepper.packs[j][-1]
        if (not last or stepper.trajs[j].family == "fourier") and trial_rho[j] >= TWO_PI:
            dt = bisect(lambda dt, j=j: TWO_PI - probe(dt)[3][j], -1.0)
            found.append(_Crossing("segment_done", -1, j, dt))

    return found


def refined_times(ts: np.ndarray, reach: int = 8, per_octave: int = 4) -> np.ndarray:
    """Sample times plus geometric refinements toward both interval edges.

    The idling integrand varies like G / (1 + G d) near a range boundary
    with G the product of the other slack distances, concentrating mass in
    a layer far narrower than the integration step; geometrically spaced
    nodes resolve it. Quadratures of per-interval integrands with boundary
    layers at the closing event share this grid.
    """
    ts = np.asarray(ts)
    if len(ts) < 2:
        return ts
    extras = []
    q = np.arange(1.0, 64.0 * per_octave + 1.0)
    scales = np.power(2.0, -q / per_octave)
    k = min(reach, len(ts) - 1)
    span_l = ts[k] - ts[0]
    keep = scales * span_l > 1e-13
    if np.any(keep):
        extras.append(ts[0] + span_l * scales[keep])
    span_r = ts[-1] - ts[-1 - k]
    keep = scales * span_r > 1e-13
    if np.any(keep):
        extras.append(ts[-1] - span_r * scales[keep])
    if not extras:
        return ts
    return np.unique(np.concatenate([ts, *extras]))


def _snapshot(t, X, Z, Y, rho, seg, pos, sigma) -> Snapshot:
    return Snapshot(t, X.copy(), Z.copy(), Y.copy(), rho.copy(), seg.copy(), pos.copy(), sigma.copy())


class _Recorder:
    """Growable sample buffers."""

    def __init__(self, m: int, n: int, capacity: int):
        self.m, self.n = m, n
        self.size = 0
        self._alloc(capacity)

    def _alloc(self, cap):
        self.t_buf = np.zeros(cap)
        self.X_buf = np.zeros((cap, self.m))
        self.Z_buf = np.zeros((cap, self.m, self.n))
        self.Y_buf = np.zeros((cap, self.m))
        self.rho_buf = np.zeros((cap, self.n))
        self.seg_buf = np.zeros((cap, self.n), dtype=np.int32)
        self.pos_buf = np.zeros((cap, self.n, 2))
        self.sig_buf = np.zeros((cap, self.m))

    def add(self, t, X, Z, Y, rho, seg, px, py, sigma) -> int:
        if self.size >= len(self.t_buf):
            old = (self.t_buf, self.X_buf, self.Z_buf, self.Y_buf, self.rho_buf, self.seg_buf, self.pos_buf, self.sig_buf)
            self._alloc(int(len(self.t_buf) * 1.5) + 64)
            for new, prev in zip(
                (self.t_buf, self.X_buf, self.Z_buf, self.Y_buf, self.rho_buf, self.seg_buf, self.pos_buf, self.sig_buf), old
            ):
                new[: prev.shape[0]] = prev
        k = self.size
        self.t_buf[k] = t
        self.X_buf[k] = X
        self.Z_buf[k] = Z
        self.Y_buf[k] = Y
        self.rho_buf[k] = rho
        self.seg_buf[k] = seg
        self.pos_buf[k, :, 0] = px
        self.pos_buf[k, :, 1] = py
        self.sig_buf[k] = sigma
        self.size += 1
        return k


def simulate(sc: Scenario, trajs: Sequence[SegmentedTrajectory], seed: int | None = None) -> Trace:
    """Simulate the hybrid system over [0, T].

    Deterministic given (sc, trajs, seed): the seed fixes every arrival
    draw through a counter-based per-target stream split.
    """
    if len(trajs) != sc.n_agents:
        raise SimulationError(f"expected {sc.n_agents} trajectories, got {len(trajs)}")
    statics = sc.statics()
    if seed is None:
        seed = sc.seed
    trajs = list(trajs)
    m, n = statics.n_targets, statics.n_agents
    T, h, tol = statics.horizon, statics.step, statics.event_tol

    schedules = [realize_arrivals(t.arrival, T, replication_rng(seed, t.index)) for t in sc.targets]
    jump_times = sorted({float(tt) for s in schedules for tt in s.jump_times(T) if tt > 0.0})
    jump_idx = 0
    # localization leaves residuals up to (flow rate) * event_tol in the
    # crossing quantity; tolerate and clamp up to that scale
    residual_tol = max(1e-7, 20.0 * tol * float(max(statics.mu.max(), statics.beta.max())))

    X = np.zeros(m)
    Z = np.zeros((m, n))
    Y = np.zeros(m)
    rho = np.zeros(n)
    seg = np.zeros(n, dtype=np.int32)
    sigma = np.array([s.rate_at(0.0) for s in schedules])

    stepper = _Stepper(statics, trajs)
    stepper.pk = [stepper.packs[j][0] for j in range(n)]
    px, py = stepper.positions(rho)
    pos = np.stack([px, py], axis=1)

    dist0 = pair_distances(statics.target_pos, pos)
    in_range0 = dist0 <= statics.r
    target_agent = np.full(m, -1, dtype=int)
    for i in range(m):
        cands = np.nonzero(in_range0[i])[0]
        if cands.size:
            target_agent[i] = int(cands[0])
    mode = _Mode(
        target_agent=target_agent,
        in_range=in_range0,
        at_base=base_distances(statics.base, pos) <= statics.r_base,
        x_empty=np.zeros(m, dtype=bool),
        z_positive=np.zeros((m, n), dtype=bool),
    )
    mup0 = _connected_mup(pos, mode.target_agent, statics)
    mode.x_empty[:] = sigma <= mup0  # X(0) = 0 everywhere
    _refresh_z_positive(Z, sigma, mode, statics, pos)
    stepper.set_mode(mode, sigma, seg)

    rec = _Recorder(m, n, int(T / h * 1.15) + 256)
    rec.add(0.0, X, Z, Y, rho, seg, px, py, sigma)

    events: list[EventRecord] = []
    breaks: list[Break] = []
    intervals: list[ModeInterval] = []
    warnings: list[str] = []
    interval_t0 = 0.0
    interval_i0 = 0
    interval_mode = mode.copy()
    interval_sigma = sigma.copy()

    t = 0.0
    guard_steps = 0
    max_steps = int(T / h * 20) + 10_000
    while t < T - 1e-12:
        guard_steps += 1
        if guard_steps > max_steps:
            raise SimulationError(f"step budget exceeded at t = {t:.6g}")

        t_next_jump = jump_times[jump_idx] if jump_idx < len(jump_times) else math.inf
        # Steps re-align to the fixed grid after an event so that runs with
        # perturbed parameters share quadrature nodes away from their events.
        t_grid = (math.floor(t / h + 1e-9) + 1) * h
        dt_max = min(t_grid - t, T - t, t_next_jump - t)
        crossings: list[_Crossing] = []
        if dt_max > 1e-13:
            Xn, Zn, Yn, rn, pxn, pyn = stepper.rk4(X, Z, Y, rho, dt_max)
            crossings = _find_crossings(stepper, X, Z, rho, (Xn, Zn, rn, pxn, pyn), dt_max, mode)

        if crossings:
            crossings.sort(key=lambda c: (c.dt, _KIND_RANK.get(c.kind, 9), c.i, c.j))
            dt_ev = crossings[0].dt
            batch = [c for c in crossings if c.dt - dt_ev <= tol]
            if len(batch) > 1:
                msg = f"simultaneous events at t = {t + dt_ev:.9g}: " + ", ".join(f"{c.kind}({c.i},{c.j})" for c in batch)
                warnings.append(msg)
                log.warning(msg)
            X, Z, Y, rho, px, py = stepper.rk4(X, Z, Y, rho, dt_ev)
            t = t + dt_ev
            # snap the crossing queues onto their boundary before recording
            for c in batch:
                if c.kind == "target_empty":
                    X[c.i] = 0.0
                elif c.kind == "onboard_empty":
                    Z[c.i, c.j] = 0.0
        else:
            if dt_max > 1e-13:
                X, Z, Y, rho, px, py = Xn, Zn, Yn, rn, pxn, pyn
            t = t + max(dt_max, 0.0)
            batch = []

        # Clamp tolerance-level negatives left by localization
        X[(X < 0) & (X > -residual_tol)] = 0.0
        Z[(Z < 0) & (Z > -residual_tol)] = 0.0
        if np.any(X < 0) or np.any(Z < 0):
            raise SimulationError(f"negative queue beyond tolerance at t = {t:.6g}")

        at_jump = jump_idx < len(jump_times) and t >= jump_times[jump_idx] - 1e-12
        if not batch and not at_jump:
            rec.add(t, X, Z, Y, rho, seg, px, py, sigma)
            if t < T - 1e-12:
                continue
            break

        # --- process a break: commit samples, apply discrete changes ---
        pos = np.stack([px, py], axis=1)
        pre_idx = rec.add(t, X, Z, Y, rho, seg, px, py, sigma)
        switch_agent = None
        records: list[EventRecord] = []

        def make_record(kind, i, j, endogenous, cause, handover_to=None):
            prev = _snapshot(t, X, Z, Y, rho, seg, pos, sigma)
            return EventRecord(
                index=len(events) + len(records),
                time=t,
                kind=kind,
                i=i,
                j=j,
                endogenous=endogenous,
                cause=cause,
                handover_to=handover_to,
                pre=prev,
                post=prev,  # replaced after applying the change
            )

        def finish_record(recd):
            recd.post = _snapshot(t, X, Z, Y, rho, seg, pos, sigma)
            records.append(recd)

        for c in sorted(batch, key=lambda c: (_KIND_RANK.get(c.kind, 9), c.i, c.j)):
            if c.kind == "segment_done":
                switch_agent = c.j
                seg = seg.copy()
                if seg[c.j] < trajs[c.j].n_segments - 1:
                    seg[c.j] += 1  # otherwise the last segment repeats from its anchor
                rho = rho.copy()
                rho[c.j] = 0.0
                stepper.pk = [stepper.packs[jj][seg[jj]] for jj in range(n)]
                px, py = stepper.positions(rho)
                pos = np.stack([px, py], axis=1)
                # Discontinuous relocation: re-derive range membership
                _apply_relocation_events(c.j, t, pos, mode, statics, make_record, finish_record)
                continue
            if c.kind == "target_empty":
                recd = make_record("target_empty", c.i, int(mode.target_agent[c.i]), True, "guard")
                X[c.i] = 0.0
                mode.x_empty[c.i] = True
                finish_record(recd)
            elif c.kind == "target_fill":
                recd = make_record("target_fill", c.i, c.j, True, "guard")
                mode.x_empty[c.i] = False
                finish_record(recd)
            elif c.kind == "onboard_empty":
                recd = make_record("onboard_empty", c.i, c.j, True, "guard")
                Z[c.i, c.j] = 0.0
                mode.z_positive[c.i, c.j] = False
                finish_record(recd)
            elif c.kind == "range_enter":
                recd = make_record("range_enter", c.i, c.j, True, "guard")
                mode.in_range[c.i, c.j] = True
                if mode.target_agent[c.i] < 0:
                    mode.target_agent[c.i] = c.j
                finish_record(recd)
            elif c.kind == "range_exit":
                handover = None
                if mode.target_agent[c.i] == c.j:
                    others = [l for l in range(n) if l != c.j and mode.in_range[c.i, l]]
                    handover = others[0] if others else None
                recd = make_record("range_exit", c.i, c.j, True, "guard", handover_to=handover)
                mode.in_range[c.i, c.j] = False
                if mode.target_agent[c.i] == c.j:
                    mode.target_agent[c.i] = handover if handover is not None else -1
                finish_record(recd)
            elif c.kind == "base_enter":
                recd = make_record("base_enter", -1, c.j, True, "guard")
                mode.at_base[c.j] = True
                finish_record(recd)
            elif c.kind == "base_exit":
                recd = make_record("base_exit", -1, c.j, True, "guard")
                mode.at_base[c.j] = False
                finish_record(recd)

        if at_jump:
            t = jump_times[jump_idx]
            jump_idx += 1
            sigma = sigma.copy()
            for i, sched in enumerate(schedules):
                if any(abs(tt - t) <= 1e-12 for tt in sched.jump_times(T)):
                    recd = make_record("rate_jump", i, -1, False, "arrival")
                    sigma[i] = sched.rate_at(t + 1e-12)
                    recd.post = _snapshot(t, X, Z, Y, rho, seg, pos, sigma)
                    records.append(recd)

        # Consistency pass: pinned target queues whose net inflow turned
        # positive leave zero now (caused by the change just applied).
        mup = _connected_mup(pos, mode.target_agent, statics)
        for i in range(m):
            if mode.x_empty[i] and sigma[i] - mup[i] > 1e-15:
                recd = make_record("target_fill", i, int(mode.target_agent[i]), not at_jump, "induced")
                mode.x_empty[i] = False
                finish_record(recd)
        _refresh_z_positive(Z, sigma, mode, statics, pos)
        stepper.set_mode(mode, sigma, seg)

        post_idx = rec.add(t, X, Z, Y, rho, seg, px, py, sigma) if switch_agent is not None else pre_idx

        events.extend(records)
        breaks.append(Break(time=t, sample_pre=pre_idx, sample_post=post_idx, switch_agent=switch_agent, records=records))
        intervals.append(
            ModeInterval(
                t0=interval_t0,
                t1=t,
                i0=interval_i0,
                i1=pre_idx,
                target_agent=interval_mode.target_agent,
                at_base=interval_mode.at_base,
                x_empty=interval_mode.x_empty,
                z_positive=interval_mode.z_positive,
                sigma=interval_sigma,
                in_range=interval_mode.in_range,
            )
        )
        interval_t0 = t
        interval_i0 = post_idx
        interval_mode = mode.copy()
        interval_sigma = sigma.copy()

    last_idx = rec.size - 1
    intervals.append(
        ModeInterval(
            t0=interval_t0,
            t1=t,
            i0=interval_i0,
            i1=last_idx,
            target_agent=interval_mode.target_agent,
            at_base=interval_mode.at_base,
            x_empty=interval_mode.x_empty,
            z_positive=interval_mode.z_positive,
            sigma=interval_sigma,
            in_range=interval_mode.in_range,
        )
    )

    k = rec.size
    return Trace(
        times=rec.t_buf[:k].copy(),
        X=rec.X_buf[:k].copy(),
        Z=rec.Z_buf[:k].copy(),
        Y=rec.Y_buf[:k].copy(),
        rho=rec.rho_buf[:k].copy(),
        seg=rec.seg_buf[:k].copy(),
        pos=rec.pos_buf[:k].copy(),
        sigma=rec.sig_buf[:k].copy(),
        events=events,
        breaks=breaks,
        intervals=intervals,
        schedules=schedules,
        trajectories=trajs,
        statics=statics,
        seed=seed,
        warnings=warnings,
    )


def _refresh_z_positive(Z, sigma, mode, statics, pos):
    """An onboard queue with active inflow is off its zero boundary."""
    mode.z_positive |= Z > 0.0
    ti = np.nonzero(mode.target_agent >= 0)[0]
    for i in ti:
        j = int(mode.target_agent[i])
        d = float(np.hypot(*(statics.target_pos[i] - pos[j])))
        p = max(0.0, 1.0 - d / statics.r[i, j])
        inflow = min(sigma[i], statics.mu[i, j] * p) if mode.x_empty[i] else statics.mu[i, j] * p
        if inflow > 1e-15:
            mode.z_positive[i, j] = True


def _apply_relocation_events(agent, t, pos, mode, statics, make_record, finish_record):
    """After a trajectory-segment switch the agent position jumps; range
    memberships are re-derived and the implied enter/exit events recorded."""
    m = statics.n_targets
    n = len(mode.at_base)
    d_new = np.sqrt(np.sum((statics.target_pos - pos[agent]) ** 2, axis=1))
    for i in range(m):
        now_in = d_new[i] <= statics.r[i, agent]
        was_in = mode.in_range[i, agent]
        if was_in and not now_in:
            handover = None
            if mode.target_agent[i] == agent:
                others = [l for l in range(n) if l != agent and mode.in_range[i, l]]
                handover = others[0] if others else None
            recd = make_record("range_exit", i, agent, True, "switch", handover_to=handover)
            mode.in_range[i, agent] = False
            if mode.target_agent[i] == agent:
                mode.target_agent[i] = handover if handover is not None else -1
            finish_record(recd)
        elif now_in and not was_in:
            recd = make_record("range_enter", i, agent, True, "switch")
            mode.in_range[i, agent] = True
            if mode.target_agent[i] < 0:
                mode.target_agent[i] = agent
            finish_record(recd)
    d_base = float(np.hypot(*(statics.base - pos[agent])))
    now_at = d_base <= statics.r_base[agent]
    if mode.at_base[agent] and not now_at:
        recd = make_record("base_exit", -1, agent, True, "switch")
        mode.at_base[agent] = False
        finish_record(recd)
    elif now_at and not mode.at_base[agent]:
        recd = make_record("base_enter", -1, agent, True, "switch")
        mode.at_base[agent] = True
        finish_record(recd)
