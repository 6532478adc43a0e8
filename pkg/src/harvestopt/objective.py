"""Cost components over a sample path and assembly of the cost gradient.

The total cost trades collected-but-undelivered backlog against delivered
data, penalizes idling agents, charges data left onboard at the horizon,
and (ellipse family) adds the base-passing constraint penalty:

  J = (1/T) int_0^T (alpha sum q X - (1-alpha) sum q Y + M_I sum I_j) dt
      + (1/T) sum Z(T) + M_C sum C_j
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hybridsim import Trace, refined_times
from .ipa import IpaResult
from .scenario import Scenario, StaticParams
from .trajectory import agent_slices, ellipse_base_penalty, positions_along, segment_slices


@dataclass(frozen=True)
class CostBreakdown:
    """Per-component sample cost; total recomputes from the parts."""

    j1: float  # time-average weighted target backlog
    j2: float  # time-average weighted base content
    j3: float  # time-average idling penalty (includes its weight)
    jf: float  # terminal onboard penalty
    penalty: float  # base-passing constraint total
    total: float

    @staticmethod
    def assemble(j1, j2, j3, jf, penalty, alpha) -> "CostBreakdown":
        total = alpha * j1 - (1.0 - alpha) * j2 + j3 + jf + penalty
        return CostBreakdown(j1=j1, j2=j2, j3=j3, jf=jf, penalty=penalty, total=total)

    def row(self) -> list[float]:
        return [self.total, self.j1, self.j2, self.j3, self.jf, self.penalty]

    ROW_HEADER = ("J", "J1", "J2", "J3", "Jf", "penalty")


def _statics(sc) -> StaticParams:
    return sc.statics() if isinstance(sc, Scenario) else sc


def idling(state, sc) -> np.ndarray:
    """Idling value per agent: log(1 + slack_base * prod_i slack_i).

    Zero exactly when the agent is within some collection range or the
    delivery range; grows with distance from everything otherwise.
    """
    statics = _statics(sc)
    return idle_values(np.atleast_2d(state.pos), statics)


def idle_values(pos: np.ndarray, statics: StaticParams) -> np.ndarray:
    """(N,) idling values for agent positions (N, 2)."""
    diff = statics.target_pos[:, None, :] - pos[None, :, :]
    slack_t = np.maximum(0.0, np.sqrt(np.sum(diff * diff, axis=2)) - statics.r)  # (M, N)
    slack_b = np.maximum(0.0, np.sqrt(np.sum((pos - statics.base) ** 2, axis=1)) - statics.r_base)
    return np.log1p(slack_b * np.prod(slack_t, axis=0))


def idle_series(trace: Trace) -> np.ndarray:
    """(n_samples, N) idling values along a trace."""
    statics = trace.statics
    diff = trace.pos[:, None, :, :] - statics.target_pos[None, :, None, :]  # (n, M, N, 2)
    dist = np.sqrt(np.sum(diff * diff, axis=3))
    slack_t = np.maximum(0.0, dist - statics.r[None, :, :])
    db = np.sqrt(np.sum((trace.pos - statics.base) ** 2, axis=2))
    slack_b = np.maximum(0.0, db - statics.r_base[None, :])
    return np.log1p(slack_b * np.prod(slack_t, axis=1))


def base_penalty_total(trajs, statics: StaticParams) -> float:
    """Sum of the base-passing penalties over all ellipse segments."""
    total = 0.0
    for traj in trajs:
        if traj.family != "ellipse":
            continue
        for params in traj.segments:
            value, _ = ellipse_base_penalty(params, statics.base)
            total += value
    return total


def sample_cost(trace: Trace, sc) -> CostBreakdown:
    """Cost components accumulated over one full sample path.

    Trapezoidal quadrature on the sample grid with event instants as
    nodes. The idling integrand collapses over a thin layer around each
    range crossing, so its quadrature refines geometrically toward
    interval edges.
    """
    statics = _statics(sc)
    T = statics.horizon
    if trace.times[-1] < T - max(10 * statics.step, 1e-9):
        raise ValueError(f"trace covers [0, {trace.times[-1]:.6g}] but the horizon is {T:.6g}")
    ts = trace.times
    j1 = float(np.trapezoid(trace.X @ statics.q, ts)) / T
    j2 = float(np.trapezoid(trace.Y @ statics.q, ts)) / T
    j3 = statics.m_idle * _idle_integral(trace, statics) / T
    jf = float(trace.Z[-1].sum()) / T
    penalty = statics.m_constraint * base_penalty_total(trace.trajectories, statics)
    return CostBreakdown.assemble(j1, j2, j3, jf, penalty, statics.alpha)


def _idle_integral(trace: Trace, statics: StaticParams) -> float:
    """Integral of the summed idling values with edge-refined quadrature."""
    total = 0.0
    for iv in trace.intervals:
        ts = trace.times[iv.i0 : iv.i1 + 1]
        if len(ts) < 2:
            continue
        tf = refined_times(ts)
        idle_sum = np.zeros(len(tf))
        for j in range(statics.n_agents):
            params = trace.trajectories[j].segments[int(trace.seg[iv.i0, j])]
            rho_f = np.interp(tf, ts, trace.rho[iv.i0 : iv.i1 + 1, j])
            pos_j = positions_along(params, rho_f)
            dist_t = np.sqrt(np.sum((pos_j[:, None, :] - statics.target_pos[None, :, :]) ** 2, axis=2))
            slack_t = np.maximum(0.0, dist_t - statics.r[:, j])
            slack_b = np.maximum(0.0, np.sqrt(np.sum((pos_j - statics.base) ** 2, axis=1)) - statics.r_base[j])
            idle_sum += np.log1p(slack_b * np.prod(slack_t, axis=1))
        total += float(np.trapezoid(idle_sum, tf))
    return total


def sample_gradient(trace: Trace, ipa_result: IpaResult, sc) -> np.ndarray:
    """Assemble the sample cost gradient from propagated sensitivities.

    Pure combination of the inter-event integrals, the terminal onboard
    Jacobian, and the analytic constraint gradient; event-time derivatives
    enter only through the state Jacobians, never directly.
    """
    statics = _statics(sc)
    T = statics.horizon
    grad = (
        statics.alpha * ipa_result.int_qx
        - (1.0 - statics.alpha) * ipa_result.int_qy
        + statics.m_idle * ipa_result.int_idle
    ) / T
    grad = grad + ipa_result.final.Zp.sum(axis=(0, 1)) / T

    trajs = trace.trajectories
    for traj, a_sl in zip(trajs, agent_slices(trajs)):
        if traj.family != "ellipse":
            continue
        for params, s_sl in zip(traj.segments, segment_slices(traj)):
            _, pgrad = ellipse_base_penalty(params, statics.base)
            block = grad[a_sl]
            block[s_sl] += statics.m_constraint * pgrad
    return grad
