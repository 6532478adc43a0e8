"""Continuous flow-queue dynamics: proximity rates, connection arbitration,
and the queue flow rates between events.

Data flows target -> agent -> base as fluid. Each queue rate switches
branch when a queue empties or an agent crosses a range boundary; between
such events the rates below are smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LinearRampRate:
    """Default normalized proximity rate p(D) = max(0, 1 - D/r).

    Any replacement must be monotonically non-increasing in distance, zero
    beyond the range, and continuous.
    """

    def value(self, dist, r):
        return np.maximum(0.0, 1.0 - dist / r)

    def slope(self, dist, r):
        """dp/dD; at D == r the one-sided value from inside is used."""
        return np.where(dist <= r, -1.0 / r, 0.0)


DEFAULT_RATE_MODEL = LinearRampRate()


def proximity_rate(w: np.ndarray, s: np.ndarray, r: float, model=DEFAULT_RATE_MODEL) -> float:
    """Normalized collection/delivery rate for a node at w and an agent at s."""
    if r <= 0:
        raise ValueError(f"range must be positive, got {r}")
    return float(model.value(np.hypot(*(np.asarray(w) - np.asarray(s))), r))


@dataclass
class HybridState:
    """Continuous state at time t.

    X: target queue contents (M,); Z: onboard contents (M, N); Y: base
    contents per origin target (M,); pos: agent positions (N, 2); rho:
    phase of each agent on its active segment (unwrapped for open curves);
    seg: active segment index per agent; sigma: current arrival rates (M,).
    """

    t: float
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    pos: np.ndarray
    rho: np.ndarray
    seg: np.ndarray
    sigma: np.ndarray

    def copy(self) -> "HybridState":
        return HybridState(
            t=self.t,
            X=self.X.copy(),
            Z=self.Z.copy(),
            Y=self.Y.copy(),
            pos=self.pos.copy(),
            rho=self.rho.copy(),
            seg=self.seg.copy(),
            sigma=self.sigma.copy(),
        )


@dataclass
class ConnectionMap:
    """Discrete interaction state: at most one agent collects per target."""

    target_agent: np.ndarray  # (M,) agent index or -1
    base: np.ndarray  # (N,) bool, agent within delivery range

    def copy(self) -> "ConnectionMap":
        return ConnectionMap(self.target_agent.copy(), self.base.copy())


def pair_distances(target_pos: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """(M, N) Euclidean distances between targets and agents."""
    diff = target_pos[:, None, :] - pos[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def base_distances(base: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((pos - base[None, :]) ** 2, axis=1))


def assign_connections(state: HybridState, statics, prev: ConnectionMap | None = None) -> ConnectionMap:
    """Connection arbitration.

    A target keeps its current agent while that agent stays in range; an
    agent newly in range connects only if the target is unconnected
    (first come keeps it). Simultaneous candidates break ties by lower
    agent index. Base connection is purely range-based and not exclusive.
    """
    m, n = statics.n_targets, statics.n_agents
    dist = pair_distances(statics.target_pos, state.pos)
    in_range = dist <= statics.r
    target_agent = np.full(m, -1, dtype=int)
    if prev is not None:
        for i in range(m):
            j = prev.target_agent[i]
            if j >= 0 and in_range[i, j]:
                target_agent[i] = j
    for i in range(m):
        if target_agent[i] < 0:
            candidates = np.nonzero(in_range[i])[0]
            if candidates.size:
                target_agent[i] = int(candidates[0])
    base = base_distances(statics.base, state.pos) <= statics.r_base
    return ConnectionMap(target_agent=target_agent, base=base)


def collection_proximity(state: HybridState, conn: ConnectionMap, statics, model=DEFAULT_RATE_MODEL):
    """(M,) proximity rate of each target's connected agent (0 if none)."""
    m = statics.n_targets
    p = np.zeros(m)
    for i in range(m):
        j = conn.target_agent[i]
        if j >= 0:
            d = np.hypot(*(statics.target_pos[i] - state.pos[j]))
            p[i] = model.value(d, statics.r[i, j])
    return p


def queue_flow_rates(
    state: HybridState,
    conn: ConnectionMap,
    statics,
    model=DEFAULT_RATE_MODEL,
    x_empty: np.ndarray | None = None,
    z_positive: np.ndarray | None = None,
):
    """Right-hand sides (Xdot, Zdot, Ydot) for the current mode.

    Per target i with connected agent j at proximity P:
      Xdot_i = 0                 if X_i = 0 and sigma_i <= mu_ij P
             = sigma_i - mu_ij P otherwise
    The effective onboard inflow uses mu~ = min(sigma/P, mu) while the
    target queue is empty (collection passes arrivals straight through):
      Zdot_ij = mu~ P - beta_ij P_B, pinned at 0 when empty with net outflow.
      Ydot_i  = sum_j beta_ij P_B 1[Z_ij > 0].

    x_empty / z_positive freeze the branch choices for a whole integrator
    step so stage evaluations cannot flip modes before the corresponding
    event is localized; by default they are read off the state.
    """
    m, n = statics.n_targets, statics.n_agents
    if x_empty is None:
        x_empty = state.X <= 0.0
    if z_positive is None:
        z_positive = state.Z > 0.0

    x_dot = state.sigma.copy()
    z_dot = np.zeros((m, n))
    ti = np.nonzero(conn.target_agent >= 0)[0]
    if ti.size:
        ja = conn.target_agent[ti]
        diff = statics.target_pos[ti] - state.pos[ja]
        p = model.value(np.sqrt(np.sum(diff * diff, axis=1)), statics.r[ti, ja])
        mup = statics.mu[ti, ja] * p
        sig = state.sigma[ti]
        empty = x_empty[ti]
        x_dot[ti] = np.where(empty & (sig <= mup), 0.0, sig - mup)
        z_dot[ti, ja] = np.where(empty, np.minimum(sig, mup), mup)

    p_base = model.value(base_distances(statics.base, state.pos), statics.r_base)
    p_base = np.where(conn.base, p_base, 0.0)
    outflow = statics.beta * p_base[None, :] * z_positive
    z_dot -= outflow
    y_dot = outflow.sum(axis=1)
    return x_dot, z_dot, y_dot
