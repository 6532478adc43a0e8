"""Sample-path sensitivity propagation along a simulated trace.

Walks the recorded event sequence: between breaks the queue-state
Jacobians evolve by quadrature of proximity-rate partials, at each event
the event-time derivative is formed from values observed at that instant
and the corresponding jump rule is applied. Only three event kinds move
the Jacobians discontinuously: a target queue emptying (its derivative
transfers onboard), an onboard queue emptying (its derivative transfers
to the base), and a range exit with handover to another agent.

Arrival randomness enters only through values frozen in the trace
(event times and the rate scalars recorded in event snapshots); no
operation here can reach an arrival-process generator.

Two modes:
  paper     - agent position partials taken at fixed phase.
  augmented - additionally propagates the phase's own parameter
              dependence, giving the exact pathwise derivative
              (finite-difference checks should use this mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .flowdyn import ConnectionMap, queue_flow_rates
from .hybridsim import EventRecord, ModeInterval, Snapshot, Trace, refined_times
from .trajectory import (
    SegmentedTrajectory,
    agent_slices,
    curve_tangent,
    param_partials,
    partials_along,
    phase_rate,
    phase_rate_terms_along,
    positions_along,
    segment_slices,
    tangents_along,
    trajectory_param_count,
)


EPS_DENOM = 1e-8


def _segment_columns(trajs, slices: list[slice], j: int, seg_idx: int) -> slice:
    """Columns of agent j's active segment inside the full flat vector."""
    inner = segment_slices(trajs[j])[seg_idx]
    start = slices[j].start
    return slice(start + inner.start, start + inner.stop)


class TangentialCrossing(Exception):
    """Event-time derivative undefined: the guard is crossed tangentially."""

    def __init__(self, ev: EventRecord, denom: float):
        self.event = ev
        self.denom = denom
        super().__init__(f"{ev.kind}(i={ev.i}, j={ev.j}) at t={ev.time:.6g}: guard rate {denom:.3e} below {EPS_DENOM:.0e}")


@dataclass
class SensitivityState:
    """Jacobians of the continuous state w.r.t. the flat parameter vector.

    All blocks start at zero: initial queues do not depend on the
    trajectory parameters. While a target queue is pinned at zero its
    Jacobian row is identically zero.
    """

    Xp: np.ndarray  # (M, P)
    Zp: np.ndarray  # (M, N, P)
    Yp: np.ndarray  # (M, P)
    rhop: np.ndarray | None  # (N, P), augmented mode only
    mode: str  # "paper" | "augmented"

    @classmethod
    def zeros(cls, m: int, n: int, p: int, mode: str) -> "SensitivityState":
        return cls(
            Xp=np.zeros((m, p)),
            Zp=np.zeros((m, n, p)),
            Yp=np.zeros((m, p)),
            rhop=np.zeros((n, p)) if mode == "augmented" else None,
            mode=mode,
        )

    def copy(self) -> "SensitivityState":
        return SensitivityState(
            self.Xp.copy(),
            self.Zp.copy(),
            self.Yp.copy(),
            None if self.rhop is None else self.rhop.copy(),
            self.mode,
        )


@dataclass
class IpaResult:
    """run_ipa output: final Jacobians plus the time integrals the cost
    gradient assembly needs, and the per-event time-derivative log."""

    final: SensitivityState
    int_qx: np.ndarray  # (P,) integral of sum_i q_i X'_i dt
    int_qy: np.ndarray  # (P,) integral of sum_i q_i Y'_i dt
    int_idle: np.ndarray  # (P,) integral of sum_j I'_j dt
    tau_log: list[tuple[int, np.ndarray]]
    n_params: int
    dense: dict | None = None


def _interval_flows(trace: Trace, sample_idx: int, interval: ModeInterval, statics):
    """Queue flow rates in an interval's frozen mode at one trace sample."""
    state = SimpleNamespace(sigma=interval.sigma, pos=trace.pos[sample_idx], X=None, Z=None)
    conn = ConnectionMap(interval.target_agent, interval.at_base)
    return queue_flow_rates(state, conn, statics, x_empty=interval.x_empty, z_positive=interval.z_positive)


def _cumtrapz(rows: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid along axis 0, starting at zero."""
    out = np.zeros_like(rows)
    if len(ts) > 1:
        dt = np.diff(ts)
        seg = 0.5 * (rows[1:] + rows[:-1]) * (dt[:, None] if rows.ndim == 2 else dt)
        np.cumsum(seg, axis=0, out=out[1:])
    return out


def _trapz(rows: np.ndarray, ts: np.ndarray) -> np.ndarray:
    if len(ts) < 2:
        return np.zeros(rows.shape[1] if rows.ndim == 2 else ())
    dt = np.diff(ts)
    return np.sum(0.5 * (rows[1:] + rows[:-1]) * dt[:, None], axis=0)


def proximity_partial(w: np.ndarray, s: np.ndarray, sp: np.ndarray, r: float) -> np.ndarray:
    """Row vector dP/dtheta for the linear proximity ramp.

    sp is the (2, P) position Jacobian of the agent. Inside range the ramp
    slope is -1/r (one-sided from inside at the boundary); outside it is 0.
    """
    d_vec = np.asarray(s, dtype=float) - np.asarray(w, dtype=float)
    d = float(np.hypot(*d_vec))
    p = sp.shape[1]
    if d > r or d < 1e-12:
        return np.zeros(p)
    return (-1.0 / r) * (d_vec / d) @ sp


def agent_position_partials(
    trajs, sens: SensitivityState, snap: Snapshot, j: int, slices: list[slice], p_total: int
) -> np.ndarray:
    """(2, P) position Jacobian of agent j at an event snapshot."""
    seg_idx = int(snap.seg[j])
    params = trajs[j].segments[seg_idx]
    sp = np.zeros((2, p_total))
    sp[:, _segment_columns(trajs, slices, j, seg_idx)] = param_partials(params, float(snap.rho[j]))
    if sens.mode == "augmented":
        sp += np.outer(curve_tangent(params, float(snap.rho[j])), sens.rhop[j])
    return sp


def event_time_derivative(
    ev: EventRecord,
    sens: SensitivityState,
    statics,
    trajs,
    slices: list[slice] | None = None,
) -> np.ndarray:
    """d tau / d theta for one event, from values observed at the event.

    Exogenous events return the zero row: their occurrence times do not
    depend on the parameters.
    """
    p_total = sens.Xp.shape[1]
    if slices is None:
        slices = agent_slices(trajs)
    if not ev.endogenous or ev.kind == "rate_jump":
        return np.zeros(p_total)

    snap = ev.pre
    if ev.kind == "target_empty":
        i, j = ev.i, ev.j
        d = float(np.hypot(*(statics.target_pos[i] - snap.pos[j])))
        pij = max(0.0, 1.0 - d / statics.r[i, j])
        denom = float(snap.sigma[i]) - statics.mu[i, j] * pij
        if abs(denom) < EPS_DENOM:
            raise TangentialCrossing(ev, denom)
        return -sens.Xp[i] / denom

    if ev.kind == "onboard_empty":
        i, j = ev.i, ev.j
        d = float(np.hypot(*(statics.base - snap.pos[j])))
        pbj = max(0.0, 1.0 - d / statics.r_base[j])
        denom = statics.beta[i, j] * pbj
        if abs(denom) < EPS_DENOM:
            raise TangentialCrossing(ev, denom)
        return sens.Zp[i, j] / denom

    if ev.kind in ("range_enter", "range_exit", "target_fill"):
        w = statics.target_pos[ev.i]
    elif ev.kind in ("base_enter", "base_exit"):
        w = statics.base
    else:
        return np.zeros(p_total)

    j = ev.j
    d_vec = snap.pos[j] - w
    d = float(np.hypot(*d_vec))
    if d < 1e-12:
        raise TangentialCrossing(ev, 0.0)
    u = d_vec / d
    params = trajs[j].segments[snap.seg[j]]
    g = curve_tangent(params, float(snap.rho[j]))
    sdot = g / np.hypot(*g)
    denom = float(u @ sdot)
    if abs(denom) < EPS_DENOM:
        raise TangentialCrossing(ev, denom)
    sp = agent_position_partials(trajs, sens, snap, j, slices, p_total)
    return -(u @ sp) / denom


def apply_event_jump(ev: EventRecord, sens: SensitivityState, tau_p: np.ndarray, statics) -> None:
    """Discrete Jacobian update at one event (in place).

    Target queue emptied: its row resets and transfers onboard. Onboard
    queue emptied: its row resets and transfers to the base. Range exit
    with handover: the target row absorbs the new collector's rate step.
    Every other event leaves the Jacobians continuous.
    """
    if ev.kind == "target_empty":
        sens.Zp[ev.i, ev.j] += sens.Xp[ev.i]
        sens.Xp[ev.i] = 0.0
    elif ev.kind == "onboard_empty":
        sens.Yp[ev.i] += sens.Zp[ev.i, ev.j]
        sens.Zp[ev.i, ev.j] = 0.0
    elif ev.kind == "range_exit" and ev.handover_to is not None:
        # Handover: the target drain rate steps from sigma (the departing
        # agent is at zero proximity) to sigma - mu_il P_il, and the new
        # collector's onboard inflow steps from 0 to mu~_il P_il, so both
        # rows jump by the flow difference times tau'. The two cancel in
        # the conservation sum. With the queue pinned at zero (only
        # possible here when sigma = 0) every flow vanishes and the rows
        # stay continuous.
        i, l = ev.i, ev.handover_to
        d = float(np.hypot(*(statics.target_pos[i] - ev.pre.pos[l])))
        pil = max(0.0, 1.0 - d / statics.r[i, l])
        if ev.pre.X[i] > 0.0:
            inflow = statics.mu[i, l] * pil
            sens.Xp[i] += inflow * tau_p
        else:
            inflow = min(float(ev.pre.sigma[i]), statics.mu[i, l] * pil)
        sens.Zp[i, l] -= inflow * tau_p


def _idle_gradient_integral(
    sens: SensitivityState,
    interval: ModeInterval,
    trace: Trace,
    statics,
    trajs,
    slices: list[slice],
    rhop_paths: list[np.ndarray | None],
) -> np.ndarray:
    """Integral of the idling-gradient rows over one interval.

    Computed on an edge-refined grid; the slack of a visited node is zero
    throughout the interval, so exclusion products handle zero factors
    exactly, and the mode decides each factor's side (the one-sided
    integrand limit at boundary nodes shared with range events).
    """
    p_total = sens.Xp.shape[1]
    i0, i1 = interval.i0, interval.i1
    ts = trace.times[i0 : i1 + 1]
    if len(ts) < 2:
        return np.zeros(p_total)
    m, n = statics.n_targets, statics.n_agents
    tf = refined_times(ts)
    n_f = len(tf)
    seg_row = trace.seg[i0]

    idle_rows = np.zeros((n_f, p_total))
    for j in range(n):
        seg_idx = int(seg_row[j])
        params = trajs[j].segments[seg_idx]
        cols = _segment_columns(trajs, slices, j, seg_idx)
        rho_f = np.interp(tf, ts, trace.rho[i0 : i1 + 1, j])
        pos_j = positions_along(params, rho_f)
        sp = np.zeros((n_f, 2, p_total))
        sp[:, :, cols] = partials_along(params, rho_f)
        if sens.mode == "augmented":
            # phase sensitivity varies smoothly; linear interpolation onto
            # the refined nodes is ample
            k_right = np.clip(np.searchsorted(ts, tf, side="left"), 1, len(ts) - 1)
            t_l, t_r = ts[k_right - 1], ts[k_right]
            w = np.where(t_r > t_l, (tf - t_l) / np.where(t_r > t_l, t_r - t_l, 1.0), 0.0)
            rhop_f = (1 - w)[:, None] * rhop_paths[j][k_right - 1] + w[:, None] * rhop_paths[j][k_right]
            g = tangents_along(params, rho_f)
            sp += np.einsum("nd,np->ndp", g, rhop_f)

        diff_t = pos_j[:, None, :] - statics.target_pos[None, :, :]  # (n_f, M, 2)
        dist_t = np.sqrt(np.sum(diff_t * diff_t, axis=2))
        diff_b = pos_j - statics.base
        dist_b = np.hypot(diff_b[:, 0], diff_b[:, 1])
        slack_t = np.maximum(0.0, dist_t - statics.r[:, j])  # (n_f, M)
        slack_b = np.maximum(0.0, dist_b - statics.r_base[j])
        factors = np.concatenate([slack_b[:, None], slack_t], axis=1)  # (n_f, M+1)
        # product of all factors except k, via prefix/suffix cumulative products
        pref = np.cumprod(np.concatenate([np.ones((n_f, 1)), factors[:, :-1]], axis=1), axis=1)
        suff = np.cumprod(np.concatenate([np.ones((n_f, 1)), factors[:, :0:-1]], axis=1), axis=1)[:, ::-1]
        excl = pref * suff
        f_prod = factors[:, 0] * excl[:, 0]
        grad_sum = np.zeros((n_f, p_total))
        if not interval.at_base[j]:
            safe_b = np.where(dist_b < 1e-12, 1e-12, dist_b)
            df = np.einsum("nd,ndp->np", diff_b / safe_b[:, None], sp)
            grad_sum += excl[:, 0][:, None] * df
        for i in range(m):
            if interval.in_range[i, j]:
                continue
            safe_t = np.where(dist_t[:, i] < 1e-12, 1e-12, dist_t[:, i])
            df = np.einsum("nd,ndp->np", diff_t[:, i, :] / safe_t[:, None], sp)
            grad_sum += excl[:, 1 + i][:, None] * df
        idle_rows += grad_sum / (1.0 + f_prod)[:, None]
    return _trapz(idle_rows, tf)


def propagate_interevent(
    sens: SensitivityState,
    interval: ModeInterval,
    trace: Trace,
    statics,
    trajs,
    slices: list[slice],
    dense: dict | None = None,
):
    """Advance the Jacobians across one event-free interval (in place).

    Returns the interval's contributions to the three cost-gradient time
    integrals (qX', qY', idle').
    """
    p_total = sens.Xp.shape[1]
    i0, i1 = interval.i0, interval.i1
    ts = trace.times[i0 : i1 + 1]
    n_s = len(ts)
    zero = np.zeros(p_total)
    if n_s == 0:
        return zero, zero, zero
    m, n = statics.n_targets, statics.n_agents
    seg_row = trace.seg[i0]

    # Position Jacobians along the interval, per agent: (n_s, 2, P)
    sp_full: list[np.ndarray] = []
    rhop_paths: list[np.ndarray | None] = []
    for j in range(n):
        seg_idx = int(seg_row[j])
        params = trajs[j].segments[seg_idx]
        cols = _segment_columns(trajs, slices, j, seg_idx)
        rho_s = trace.rho[i0 : i1 + 1, j]
        sp = np.zeros((n_s, 2, p_total))
        sp[:, :, cols] = partials_along(params, rho_s)
        if sens.mode == "augmented":
            rate, d_theta, d_rho = phase_rate_terms_along(params, rho_s)
            # Linear variational equation rhop' = a(t) rhop + c(t) with
            # a = d rate/d rho: since d ln rate/dt = a along the path, the
            # integrating factor is exactly rate(t)/rate(0).
            e_a = rate / rate[0]
            c_full = np.zeros((n_s, p_total))
            c_full[:, cols] = d_theta
            inner = _cumtrapz(c_full / e_a[:, None], ts)
            rhop_path = e_a[:, None] * (sens.rhop[j][None, :] + inner)
            g = tangents_along(params, rho_s)
            sp += np.einsum("nd,np->ndp", g, rhop_path)
            rhop_paths.append(rhop_path)
        else:
            rhop_paths.append(None)
        sp_full.append(sp)

    # Queue Jacobian increments by quadrature of the proximity partials
    d_xp = {}  # i -> (n_s, P)
    d_zp = {}  # (i, j) -> (n_s, P)
    d_yp = {}  # i -> (n_s, P)
    for i in range(m):
        j = int(interval.target_agent[i])
        if j < 0:
            continue
        diff = trace.pos[i0 : i1 + 1, j, :] - statics.target_pos[i]
        dist = np.hypot(diff[:, 0], diff[:, 1])
        dist = np.where(dist < 1e-12, 1e-12, dist)
        u = diff / dist[:, None]
        p_rows = (-1.0 / statics.r[i, j]) * np.einsum("nd,ndp->np", u, sp_full[j])
        cum = _cumtrapz(p_rows, ts)
        if not interval.x_empty[i]:
            d_xp[i] = -statics.mu[i, j] * cum
            d_zp[(i, j)] = statics.mu[i, j] * cum
        # Pass-through collection (empty target) moves arrivals straight
        # onboard at the arrival rate: no parameter dependence.

    for j in range(n):
        if not interval.at_base[j]:
            continue
        diff = trace.pos[i0 : i1 + 1, j, :] - statics.base
        dist = np.hypot(diff[:, 0], diff[:, 1])
        dist = np.where(dist < 1e-12, 1e-12, dist)
        u = diff / dist[:, None]
        pb_rows = (-1.0 / statics.r_base[j]) * np.einsum("nd,ndp->np", u, sp_full[j])
        cum = _cumtrapz(pb_rows, ts)
        for i in range(m):
            if interval.z_positive[i, j]:
                d_zp[(i, j)] = d_zp.get((i, j), 0) - statics.beta[i, j] * cum
                d_yp[i] = d_yp.get(i, 0) + statics.beta[i, j] * cum

    # Cost integrand rows
    qx_rows = np.broadcast_to(statics.q @ sens.Xp, (n_s, p_total)).copy()
    for i, rows in d_xp.items():
        qx_rows += statics.q[i] * rows
    qy_rows = np.broadcast_to(statics.q @ sens.Yp, (n_s, p_total)).copy()
    for i, rows in d_yp.items():
        qy_rows += statics.q[i] * rows

    part_idle = _idle_gradient_integral(sens, interval, trace, statics, trajs, slices, rhop_paths)

    part_qx = _trapz(qx_rows, ts)
    part_qy = _trapz(qy_rows, ts)

    if dense is not None:
        sl = slice(i0, i1 + 1)
        for i in range(m):
            dense["Xp"][sl, i, :] = sens.Xp[i] + (d_xp[i] if i in d_xp else 0.0)
            dense["Yp"][sl, i, :] = sens.Yp[i] + (d_yp[i] if i in d_yp else 0.0)
            for j in range(n):
                dense["Zp"][sl, i, j, :] = sens.Zp[i, j] + (d_zp[(i, j)] if (i, j) in d_zp else 0.0)

    # Commit end-of-interval values
    for i, rows in d_xp.items():
        sens.Xp[i] += rows[-1]
    for (i, j), rows in d_zp.items():
        sens.Zp[i, j] += rows[-1]
    for i, rows in d_yp.items():
        sens.Yp[i] += rows[-1]
    if sens.mode == "augmented":
        for j in range(n):
            sens.rhop[j] = rhop_paths[j][-1]

    return part_qx, part_qy, part_idle


def run_ipa(trace: Trace, mode: str = "paper", record_dense: bool = False) -> IpaResult:
    """Propagate sensitivities across the whole trace.

    Alternates event-free interval propagation with per-event time
    derivatives and jumps, in the recorded order. Raises
    TangentialCrossing when a guard is hit with vanishing approach rate.
    """
    if mode not in ("paper", "augmented"):
        raise ValueError(f"mode must be 'paper' or 'augmented', got {mode!r}")
    from .objective import idle_values  # deferred: objective builds on this module

    statics = trace.statics
    trajs = trace.trajectories
    m, n = statics.n_targets, statics.n_agents
    slices = agent_slices(trajs)
    p_total = sum(trajectory_param_count(t) for t in trajs)

    sens = SensitivityState.zeros(m, n, p_total, mode)
    int_qx = np.zeros(p_total)
    int_qy = np.zeros(p_total)
    int_idle = np.zeros(p_total)
    tau_log: list[tuple[int, np.ndarray]] = []
    dense = None
    if record_dense:
        n_s = trace.n_samples
        dense = {
            "Xp": np.zeros((n_s, m, p_total)),
            "Zp": np.zeros((n_s, m, n, p_total)),
            "Yp": np.zeros((n_s, m, p_total)),
        }

    for k, interval in enumerate(trace.intervals):
        qx, qy, idle = propagate_interevent(sens, interval, trace, statics, trajs, slices, dense)
        int_qx += qx
        int_qy += qy
        int_idle += idle
        if k >= len(trace.breaks):
            break
        br = trace.breaks[k]

        tau_switch = np.zeros(p_total)
        if br.switch_agent is not None and mode == "augmented":
            j = br.switch_agent
            rho_pre = float(trace.rho[br.sample_pre, j])
            seg_pre = int(trace.seg[br.sample_pre, j])
            rate_pre = phase_rate(trajs[j].segments[seg_pre], rho_pre)
            tau_switch = -sens.rhop[j] / rate_pre

        if br.switch_agent is not None and np.any(tau_switch):
            # The relocation changes every flow touched by the moved agent
            # discontinuously; one wholesale flow-difference jump covers the
            # queue rows (the per-record jumps below are subsumed). The
            # idling integrand itself jumps with the position, so the usual
            # boundary-term cancellation leaves a residual there.
            xf0, zf0, yf0 = _interval_flows(trace, br.sample_pre, trace.intervals[k], statics)
            xf1, zf1, yf1 = _interval_flows(trace, br.sample_post, trace.intervals[k + 1], statics)
            sens.Xp += np.outer(xf0 - xf1, tau_switch)
            sens.Zp += (zf0 - zf1)[:, :, None] * tau_switch[None, None, :]
            sens.Yp += np.outer(yf0 - yf1, tau_switch)
            i_pre = float(idle_values(trace.pos[br.sample_pre], statics).sum())
            i_post = float(idle_values(trace.pos[br.sample_post], statics).sum())
            int_idle += (i_pre - i_post) * tau_switch

        # Induced records inherit the time derivative of their cause: the
        # relocation if one happened, else the latest guard event's.
        last_guard_tau = tau_switch
        for ev in br.records:
            if ev.cause == "arrival" or not ev.endogenous:
                tau_p = np.zeros(p_total)
            elif ev.cause == "switch":
                tau_p = tau_switch
            elif ev.cause == "induced":
                tau_p = last_guard_tau
            else:
                tau_p = event_time_derivative(ev, sens, statics, trajs, slices)
                last_guard_tau = tau_p
            if ev.cause != "switch":
                apply_event_jump(ev, sens, tau_p, statics)
            tau_log.append((ev.index, tau_p))

        if br.switch_agent is not None and mode == "augmented":
            j = br.switch_agent
            seg_post = int(trace.seg[br.sample_post, j])
            rate_post = phase_rate(trajs[j].segments[seg_post], 0.0)
            sens.rhop[j] = -rate_post * tau_switch

    return IpaResult(
        final=sens,
        int_qx=int_qx,
        int_qy=int_qy,
        int_idle=int_idle,
        tau_log=tau_log,
        n_params=p_total,
        dense=dense,
    )
