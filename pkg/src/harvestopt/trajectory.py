"""Parametric trajectory families: positions, phase rates, and analytic partials.

Two closed-curve families are supported. An agent moves along its curve at
unit speed; the curve phase rho advances at rate 1/|ds/drho| so that
|ds/dt| = 1. All parameter partials are evaluated at fixed rho (the phase
is treated as parameter-independent); the sensitivity module optionally
augments them with the phase's own parameter dependence.

Flat parameter ordering (serialization and gradients):
  ellipse segment: [cx, cy, a, b, phi]
  fourier:         [fx, a_1..a_Gx, b_1..b_Gy, phx_1..phx_Gx, phy_1..phy_Gy]
Segments concatenate in order; agents concatenate in index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
FY_FIXED = 1.0  # y base frequency; only the ratio fx/fy shapes the curve
_DEGENERATE_TOL = 1e-9


class DegenerateTrajectory(Exception):
    """Curve momentarily stationary: |ds/drho| below tolerance."""


@dataclass(frozen=True)
class EllipseParams:
    """Ellipse by center (cx, cy), semi-axes (a, b), and orientation phi,
    the angle between the x axis and the a axis, kept in [0, pi)."""

    cx: float
    cy: float
    a: float
    b: float
    phi: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"semi-axes must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class FourierParams:
    """Truncated Fourier curve anchored at a fixed point for rho = 0.

      sx = a0 + sum_n amps_x[n] sin(2 pi n fx rho + phases_x[n])
      sy = b0 + sum_n amps_y[n] sin(2 pi n    rho + phases_y[n])

    The zero-frequency terms a0, b0 are not free parameters: they are
    recomputed from the anchor so that s(0) == anchor always holds.
    """

    fx: float
    amps_x: np.ndarray
    amps_y: np.ndarray
    phases_x: np.ndarray
    phases_y: np.ndarray
    anchor: np.ndarray  # (2,) point the curve passes through at rho = 0

    def __post_init__(self):
        object.__setattr__(self, "amps_x", np.atleast_1d(np.asarray(self.amps_x, dtype=float)))
        object.__setattr__(self, "amps_y", np.atleast_1d(np.asarray(self.amps_y, dtype=float)))
        object.__setattr__(self, "phases_x", np.atleast_1d(np.asarray(self.phases_x, dtype=float)))
        object.__setattr__(self, "phases_y", np.atleast_1d(np.asarray(self.phases_y, dtype=float)))
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))
        if len(self.amps_x) != len(self.phases_x) or len(self.amps_y) != len(self.phases_y):
            raise ValueError("amplitude and phase lists must have matching lengths")
        if len(self.amps_x) < 1 or len(self.amps_y) < 1:
            raise ValueError("need at least one harmonic per axis")
        if self.fx <= 0:
            raise ValueError(f"base frequency must be positive, got {self.fx}")

    @property
    def gamma_x(self) -> int:
        return len(self.amps_x)

    @property
    def gamma_y(self) -> int:
        return len(self.amps_y)

    def zero_terms(self) -> tuple[float, float]:
        """a0, b0 such that s(0) equals the anchor."""
        a0 = float(self.anchor[0] - np.dot(self.amps_x, np.sin(self.phases_x)))
        b0 = float(self.anchor[1] - np.dot(self.amps_y, np.sin(self.phases_y)))
        return a0, b0


TrajectoryParams = EllipseParams | FourierParams


@dataclass(frozen=True)
class SegmentedTrajectory:
    """Per-agent trajectory: one or more parameter blocks traversed in order.

    Segment k is active until its accumulated phase reaches 2 pi (one full
    revolution); the last segment then repeats. Each segment starts at its
    own rho = 0 point.
    """

    family: str  # "ellipse" | "fourier"
    segments: tuple[TrajectoryParams, ...]

    def __post_init__(self):
        if len(self.segments) < 1:
            raise ValueError("a trajectory needs at least one segment")

    @property
    def n_segments(self) -> int:
        return len(self.segments)


# ---------------------------------------------------------------------------
# Single-curve evaluation


def position(params: TrajectoryParams, rho: float) -> np.ndarray:
    """Point on the curve at phase rho."""
    if isinstance(params, EllipseParams):
        cr, sr = math.cos(rho), math.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        return np.array(
            [
                params.cx + params.a * cr * cp - params.b * sr * sp,
                params.cy + params.a * cr * sp + params.b * sr * cp,
            ]
        )
    a0, b0 = params.zero_terms()
    nx = np.arange(1, params.gamma_x + 1)
    ny = np.arange(1, params.gamma_y + 1)
    sx = a0 + np.dot(params.amps_x, np.sin(TWO_PI * nx * params.fx * rho + params.phases_x))
    sy = b0 + np.dot(params.amps_y, np.sin(TWO_PI * ny * FY_FIXED * rho + params.phases_y))
    return np.array([sx, sy])


def curve_tangent(params: TrajectoryParams, rho: float) -> np.ndarray:
    """ds/drho at phase rho (not normalized)."""
    if isinstance(params, EllipseParams):
        cr, sr = math.cos(rho), math.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        return np.array(
            [
                -params.a * sr * cp - params.b * cr * sp,
                -params.a * sr * sp + params.b * cr * cp,
            ]
        )
    nx = np.arange(1, params.gamma_x + 1)
    ny = np.arange(1, params.gamma_y + 1)
    cx = TWO_PI * nx * params.fx
    cy = TWO_PI * ny * FY_FIXED
    gx = np.dot(params.amps_x * cx, np.cos(cx * rho + params.phases_x))
    gy = np.dot(params.amps_y * cy, np.cos(cy * rho + params.phases_y))
    return np.array([gx, gy])


def curve_curvature_vec(params: TrajectoryParams, rho: float) -> np.ndarray:
    """d2s/drho2 at phase rho."""
    if isinstance(params, EllipseParams):
        cr, sr = math.cos(rho), math.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        return np.array(
            [
                -params.a * cr * cp + params.b * sr * sp,
                -params.a * cr * sp - params.b * sr * cp,
            ]
        )
    nx = np.arange(1, params.gamma_x + 1)
    ny = np.arange(1, params.gamma_y + 1)
    cx = TWO_PI * nx * params.fx
    cy = TWO_PI * ny * FY_FIXED
    gx = -np.dot(params.amps_x * cx * cx, np.sin(cx * rho + params.phases_x))
    gy = -np.dot(params.amps_y * cy * cy, np.sin(cy * rho + params.phases_y))
    return np.array([gx, gy])


def phase_rate(params: TrajectoryParams, rho: float) -> float:
    """drho/dt for unit-speed traversal: 1 / |ds/drho|."""
    g = curve_tangent(params, rho)
    norm = math.hypot(g[0], g[1])
    if norm < _DEGENERATE_TOL:
        raise DegenerateTrajectory(f"|ds/drho| = {norm:.3e} at rho = {rho:.6g}")
    return 1.0 / norm


def velocity(params: TrajectoryParams, rho: float) -> np.ndarray:
    """ds/dt at phase rho; unit length by construction."""
    g = curve_tangent(params, rho)
    norm = math.hypot(g[0], g[1])
    if norm < _DEGENERATE_TOL:
        raise DegenerateTrajectory(f"|ds/drho| = {norm:.3e} at rho = {rho:.6g}")
    return g / norm


def n_params(params: TrajectoryParams) -> int:
    if isinstance(params, EllipseParams):
        return 5
    return 1 + 2 * params.gamma_x + 2 * params.gamma_y


def param_partials(params: TrajectoryParams, rho: float, chain_anchor: bool = True) -> np.ndarray:
    """(2, P) matrix of ds/dtheta at fixed rho.

    For the Fourier family the zero-frequency terms depend on the free
    parameters through the anchor constraint; chain_anchor=True (default)
    includes that dependence so the partials differentiate the constrained
    curve actually being optimized. chain_anchor=False gives the raw
    per-term partials with a0, b0 held fixed.
    """
    if isinstance(params, EllipseParams):
        cr, sr = math.cos(rho), math.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        out = np.empty((2, 5))
        out[0] = (1.0, 0.0, cr * cp, -sr * sp, -params.a * cr * sp - params.b * sr * cp)
        out[1] = (0.0, 1.0, cr * sp, sr * cp, params.a * cr * cp - params.b * sr * sp)
        return out

    gx, gy = params.gamma_x, params.gamma_y
    nx = np.arange(1, gx + 1)
    ny = np.arange(1, gy + 1)
    argx = TWO_PI * nx * params.fx * rho + params.phases_x
    argy = TWO_PI * ny * FY_FIXED * rho + params.phases_y
    out = np.zeros((2, 1 + 2 * gx + 2 * gy))
    # d/dfx: only the x coordinate depends on the free base frequency
    out[0, 0] = TWO_PI * rho * np.dot(params.amps_x * nx, np.cos(argx))
    sl_ax = slice(1, 1 + gx)
    sl_ay = slice(1 + gx, 1 + gx + gy)
    sl_px = slice(1 + gx + gy, 1 + 2 * gx + gy)
    sl_py = slice(1 + 2 * gx + gy, 1 + 2 * gx + 2 * gy)
    out[0, sl_ax] = np.sin(argx)
    out[1, sl_ay] = np.sin(argy)
    out[0, sl_px] = params.amps_x * np.cos(argx)
    out[1, sl_py] = params.amps_y * np.cos(argy)
    if chain_anchor:
        # a0 = anchor_x - sum a_n sin(phx_n), so each free parameter that moves
        # a0/b0 contributes the compensating constant shift.
        out[0, sl_ax] -= np.sin(params.phases_x)
        out[1, sl_ay] -= np.sin(params.phases_y)
        out[0, sl_px] -= params.amps_x * np.cos(params.phases_x)
        out[1, sl_py] -= params.amps_y * np.cos(params.phases_y)
    return out


def tangent_partials(params: TrajectoryParams, rho: float) -> np.ndarray:
    """(2, P) matrix of d(ds/drho)/dtheta at fixed rho."""
    if isinstance(params, EllipseParams):
        cr, sr = math.cos(rho), math.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        gx = -params.a * sr * cp - params.b * cr * sp
        gy = -params.a * sr * sp + params.b * cr * cp
        out = np.empty((2, 5))
        out[0] = (0.0, 0.0, -sr * cp, -cr * sp, -gy)
        out[1] = (0.0, 0.0, -sr * sp, cr * cp, gx)
        return out

    gx_n, gy_n = params.gamma_x, params.gamma_y
    nx = np.arange(1, gx_n + 1)
    ny = np.arange(1, gy_n + 1)
    cx = TWO_PI * nx * params.fx
    cy = TWO_PI * ny * FY_FIXED
    argx = cx * rho + params.phases_x
    argy = cy * rho + params.phases_y
    out = np.zeros((2, 1 + 2 * gx_n + 2 * gy_n))
    out[0, 0] = np.dot(params.amps_x, TWO_PI * nx * np.cos(argx) - cx * np.sin(argx) * TWO_PI * nx * rho)
    sl_ax = slice(1, 1 + gx_n)
    sl_ay = slice(1 + gx_n, 1 + gx_n + gy_n)
    sl_px = slice(1 + gx_n + gy_n, 1 + 2 * gx_n + gy_n)
    sl_py = slice(1 + 2 * gx_n + gy_n, 1 + 2 * gx_n + 2 * gy_n)
    out[0, sl_ax] = cx * np.cos(argx)
    out[1, sl_ay] = cy * np.cos(argy)
    out[0, sl_px] = -params.amps_x * cx * np.sin(argx)
    out[1, sl_py] = -params.amps_y * cy * np.sin(argy)
    return out


def phase_rate_partials(params: TrajectoryParams, rho: float) -> tuple[float, np.ndarray, float]:
    """(rate, d rate/dtheta (P,), d rate/drho) at phase rho."""
    g = curve_tangent(params, rho)
    norm2 = float(g @ g)
    norm = math.sqrt(norm2)
    if norm < _DEGENERATE_TOL:
        raise DegenerateTrajectory(f"|ds/drho| = {norm:.3e} at rho = {rho:.6g}")
    inv3 = 1.0 / (norm2 * norm)
    d_theta = -(g @ tangent_partials(params, rho)) * inv3
    d_rho = -float(g @ curve_curvature_vec(params, rho)) * inv3
    return 1.0 / norm, d_theta, d_rho


# ---------------------------------------------------------------------------
# Ellipse base-passing penalty


def ellipse_base_penalty(params: EllipseParams, base: np.ndarray) -> tuple[float, np.ndarray]:
    """Quadratic penalty forcing the ellipse through the base point.

    C = (1 - f1 cos^2 phi - f2 sin^2 phi - f3 sin 2phi)^2 where the inner
    expression is 1 minus the ellipse quadratic form evaluated at the base;
    C = 0 exactly when the base lies on the ellipse. Returns (C, dC/dtheta).
    """
    a, b = params.a, params.b
    dx = float(base[0]) - params.cx
    dy = float(base[1]) - params.cy
    cp, sp = math.cos(params.phi), math.sin(params.phi)
    c2, s2 = cp * cp, sp * sp
    sin2, cos2 = math.sin(2 * params.phi), math.cos(2 * params.phi)

    f1 = (dx / a) ** 2 + (dy / b) ** 2
    f2 = (dx / b) ** 2 + (dy / a) ** 2
    f3 = (b * b - a * a) * dx * dy / (a * a * b * b)
    root = 1.0 - f1 * c2 - f2 * s2 - f3 * sin2
    value = root * root

    df1 = np.array([-2 * dx / a**2, -2 * dy / b**2, -2 * dx**2 / a**3, -2 * dy**2 / b**3, 0.0])
    df2 = np.array([-2 * dx / b**2, -2 * dy / a**2, -2 * dy**2 / a**3, -2 * dx**2 / b**3, 0.0])
    df3 = np.array(
        [
            -(b * b - a * a) * dy / (a * a * b * b),
            -(b * b - a * a) * dx / (a * a * b * b),
            -2 * dx * dy / a**3,
            2 * dx * dy / b**3,
            0.0,
        ]
    )
    grad = 2.0 * root * (-c2 * df1 - s2 * df2 - sin2 * df3)
    grad[4] = 2.0 * root * ((f1 - f2) * sin2 - 2.0 * f3 * cos2)
    return value, grad


# ---------------------------------------------------------------------------
# Segmented trajectories


def segment_duration(params: TrajectoryParams, n_quad: int = 4096) -> float:
    """Time to advance the phase by 2 pi at unit speed: integral of |ds/drho|."""
    rho = np.linspace(0.0, TWO_PI, n_quad + 1)
    if isinstance(params, EllipseParams):
        cr, sr = np.cos(rho), np.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        gx = -params.a * sr * cp - params.b * cr * sp
        gy = -params.a * sr * sp + params.b * cr * cp
    else:
        nx = np.arange(1, params.gamma_x + 1)
        ny = np.arange(1, params.gamma_y + 1)
        cx = TWO_PI * nx * params.fx
        cy = TWO_PI * ny * FY_FIXED
        gx = np.cos(np.outer(rho, cx) + params.phases_x) @ (params.amps_x * cx)
        gy = np.cos(np.outer(rho, cy) + params.phases_y) @ (params.amps_y * cy)
    speed = np.hypot(gx, gy)
    # Simpson on a uniform grid
    return float((rho[1] - rho[0]) / 3.0 * (speed[0] + speed[-1] + 4 * speed[1:-1:2].sum() + 2 * speed[2:-1:2].sum()))


def completion_times(traj: SegmentedTrajectory) -> np.ndarray:
    """Cumulative times at which each segment finishes one revolution."""
    return np.cumsum([segment_duration(p) for p in traj.segments])


def active_segment(traj: SegmentedTrajectory, t: float, dt: float = 1e-3) -> tuple[int, float]:
    """Segment index (0-based) and local phase at time t.

    The phase is integrated at unit speed from the segment start; past the
    last completion time the last segment repeats with phase wrapped
    modulo 2 pi.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    times = completion_times(traj)
    k = int(np.searchsorted(times, t, side="right"))
    if k >= traj.n_segments:
        k = traj.n_segments - 1
        t_local = (t - (times[-1] - segment_duration(traj.segments[k]))) % segment_duration(traj.segments[k])
    else:
        t_local = t - (times[k] - segment_duration(traj.segments[k]))
    params = traj.segments[k]
    rho = 0.0
    remaining = t_local
    while remaining > 0:
        h = min(dt, remaining)
        rho += h * _rk4_phase_step(params, rho, h)
        remaining -= h
    return k, rho % TWO_PI


def _rk4_phase_step(params: TrajectoryParams, rho: float, h: float) -> float:
    k1 = phase_rate(params, rho)
    k2 = phase_rate(params, rho + 0.5 * h * k1)
    k3 = phase_rate(params, rho + 0.5 * h * k2)
    k4 = phase_rate(params, rho + h * k3)
    return (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


# ---------------------------------------------------------------------------
# Flat parameter vectors


def flatten_params(params: TrajectoryParams) -> np.ndarray:
    if isinstance(params, EllipseParams):
        return np.array([params.cx, params.cy, params.a, params.b, params.phi])
    return np.concatenate([[params.fx], params.amps_x, params.amps_y, params.phases_x, params.phases_y])


def unflatten_params(template: TrajectoryParams, vec: np.ndarray) -> TrajectoryParams:
    vec = np.asarray(vec, dtype=float)
    if isinstance(template, EllipseParams):
        return EllipseParams(cx=vec[0], cy=vec[1], a=vec[2], b=vec[3], phi=vec[4])
    gx, gy = template.gamma_x, template.gamma_y
    return FourierParams(
        fx=float(vec[0]),
        amps_x=vec[1 : 1 + gx].copy(),
        amps_y=vec[1 + gx : 1 + gx + gy].copy(),
        phases_x=vec[1 + gx + gy : 1 + 2 * gx + gy].copy(),
        phases_y=vec[1 + 2 * gx + gy :].copy(),
        anchor=template.anchor.copy(),
    )


def trajectory_param_count(traj: SegmentedTrajectory) -> int:
    return sum(n_params(p) for p in traj.segments)


def segment_slices(traj: SegmentedTrajectory) -> list[slice]:
    """Slices of each segment's block inside the agent's flat vector."""
    out, off = [], 0
    for p in traj.segments:
        out.append(slice(off, off + n_params(p)))
        off += n_params(p)
    return out


def flatten_trajectory(traj: SegmentedTrajectory) -> np.ndarray:
    return np.concatenate([flatten_params(p) for p in traj.segments])


def with_flat_trajectory(traj: SegmentedTrajectory, vec: np.ndarray) -> SegmentedTrajectory:
    segs, off = [], 0
    for p in traj.segments:
        k = n_params(p)
        segs.append(unflatten_params(p, vec[off : off + k]))
        off += k
    return SegmentedTrajectory(family=traj.family, segments=tuple(segs))


def agent_slices(trajs: Sequence[SegmentedTrajectory]) -> list[slice]:
    """Slices of each agent's block inside the full flat vector."""
    out, off = [], 0
    for traj in trajs:
        k = trajectory_param_count(traj)
        out.append(slice(off, off + k))
        off += k
    return out


def flatten_all(trajs: Sequence[SegmentedTrajectory]) -> np.ndarray:
    return np.concatenate([flatten_trajectory(t) for t in trajs])


def with_flat_all(trajs: Sequence[SegmentedTrajectory], vec: np.ndarray) -> list[SegmentedTrajectory]:
    out = []
    for traj, sl in zip(trajs, agent_slices(trajs)):
        out.append(with_flat_trajectory(traj, np.asarray(vec)[sl]))
    return out


def param_labels(trajs: Sequence[SegmentedTrajectory]) -> list[str]:
    labels = []
    for j, traj in enumerate(trajs):
        for k, p in enumerate(traj.segments):
            prefix = f"agent{j}.seg{k}" if traj.n_segments > 1 else f"agent{j}"
            if isinstance(p, EllipseParams):
                labels += [f"{prefix}.{name}" for name in ("cx", "cy", "a", "b", "phi")]
            else:
                labels.append(f"{prefix}.fx")
                labels += [f"{prefix}.ax{n}" for n in range(1, p.gamma_x + 1)]
                labels += [f"{prefix}.ay{n}" for n in range(1, p.gamma_y + 1)]
                labels += [f"{prefix}.phx{n}" for n in range(1, p.gamma_x + 1)]
                labels += [f"{prefix}.phy{n}" for n in range(1, p.gamma_y + 1)]
    return labels


def normalize_orientation(traj: SegmentedTrajectory) -> SegmentedTrajectory:
    """Fold ellipse orientations back into [0, pi); the curve is unchanged."""
    if traj.family != "ellipse":
        return traj
    segs = tuple(replace(p, phi=p.phi % math.pi) for p in traj.segments)
    return SegmentedTrajectory(family=traj.family, segments=segs)


# ---------------------------------------------------------------------------
# Vectorized along-path evaluation (sensitivity propagation workhorses)


def positions_along(params: TrajectoryParams, rho: np.ndarray) -> np.ndarray:
    """(n, 2) positions at an array of phases."""
    rho = np.asarray(rho, dtype=float)
    if isinstance(params, EllipseParams):
        cr, sr = np.cos(rho), np.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        return np.stack(
            [params.cx + params.a * cr * cp - params.b * sr * sp, params.cy + params.a * cr * sp + params.b * sr * cp],
            axis=1,
        )
    a0, b0 = params.zero_terms()
    cx = TWO_PI * np.arange(1, params.gamma_x + 1) * params.fx
    cy = TWO_PI * np.arange(1, params.gamma_y + 1) * FY_FIXED
    sx = a0 + np.sin(np.outer(rho, cx) + params.phases_x) @ params.amps_x
    sy = b0 + np.sin(np.outer(rho, cy) + params.phases_y) @ params.amps_y
    return np.stack([sx, sy], axis=1)


def tangents_along(params: TrajectoryParams, rho: np.ndarray) -> np.ndarray:
    """(n, 2) curve tangents ds/drho at an array of phases."""
    rho = np.asarray(rho, dtype=float)
    if isinstance(params, EllipseParams):
        cr, sr = np.cos(rho), np.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        return np.stack(
            [-params.a * sr * cp - params.b * cr * sp, -params.a * sr * sp + params.b * cr * cp],
            axis=1,
        )
    cx = TWO_PI * np.arange(1, params.gamma_x + 1) * params.fx
    cy = TWO_PI * np.arange(1, params.gamma_y + 1) * FY_FIXED
    gx = np.cos(np.outer(rho, cx) + params.phases_x) @ (params.amps_x * cx)
    gy = np.cos(np.outer(rho, cy) + params.phases_y) @ (params.amps_y * cy)
    return np.stack([gx, gy], axis=1)


def partials_along(params: TrajectoryParams, rho: np.ndarray, chain_anchor: bool = True) -> np.ndarray:
    """(n, 2, P) fixed-phase parameter partials at an array of phases."""
    rho = np.asarray(rho, dtype=float)
    n = len(rho)
    if isinstance(params, EllipseParams):
        cr, sr = np.cos(rho), np.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        out = np.zeros((n, 2, 5))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 1.0
        out[:, 0, 2] = cr * cp
        out[:, 0, 3] = -sr * sp
        out[:, 0, 4] = -params.a * cr * sp - params.b * sr * cp
        out[:, 1, 2] = cr * sp
        out[:, 1, 3] = sr * cp
        out[:, 1, 4] = params.a * cr * cp - params.b * sr * sp
        return out

    gx_n, gy_n = params.gamma_x, params.gamma_y
    nx = np.arange(1, gx_n + 1)
    argx = np.outer(rho, TWO_PI * nx * params.fx) + params.phases_x
    argy = np.outer(rho, TWO_PI * np.arange(1, gy_n + 1) * FY_FIXED) + params.phases_y
    out = np.zeros((n, 2, 1 + 2 * gx_n + 2 * gy_n))
    out[:, 0, 0] = TWO_PI * rho * (np.cos(argx) @ (params.amps_x * nx))
    sl_ax = slice(1, 1 + gx_n)
    sl_ay = slice(1 + gx_n, 1 + gx_n + gy_n)
    sl_px = slice(1 + gx_n + gy_n, 1 + 2 * gx_n + gy_n)
    sl_py = slice(1 + 2 * gx_n + gy_n, 1 + 2 * gx_n + 2 * gy_n)
    out[:, 0, sl_ax] = np.sin(argx)
    out[:, 1, sl_ay] = np.sin(argy)
    out[:, 0, sl_px] = params.amps_x * np.cos(argx)
    out[:, 1, sl_py] = params.amps_y * np.cos(argy)
    if chain_anchor:
        out[:, 0, sl_ax] -= np.sin(params.phases_x)
        out[:, 1, sl_ay] -= np.sin(params.phases_y)
        out[:, 0, sl_px] -= params.amps_x * np.cos(params.phases_x)
        out[:, 1, sl_py] -= params.amps_y * np.cos(params.phases_y)
    return out


def phase_rate_terms_along(params: TrajectoryParams, rho: np.ndarray):
    """Per-sample pieces of the phase-rate variational equation.

    Returns (rate (n,), d rate/dtheta (n, P), d rate/drho (n,)) so that the
    phase sensitivity obeys d rhop/dt = d rate/dtheta + d rate/drho * rhop.
    """
    rho = np.asarray(rho, dtype=float)
    n = len(rho)
    g = tangents_along(params, rho)
    norm2 = np.sum(g * g, axis=1)
    norm = np.sqrt(norm2)
    if np.any(norm < _DEGENERATE_TOL):
        raise DegenerateTrajectory("curve tangent vanished along the path")
    inv3 = 1.0 / (norm2 * norm)

    if isinstance(params, EllipseParams):
        cr, sr = np.cos(rho), np.sin(rho)
        cp, sp = math.cos(params.phi), math.sin(params.phi)
        gt = np.zeros((n, 2, 5))
        gt[:, 0, 2] = -sr * cp
        gt[:, 0, 3] = -cr * sp
        gt[:, 0, 4] = -g[:, 1]
        gt[:, 1, 2] = -sr * sp
        gt[:, 1, 3] = cr * cp
        gt[:, 1, 4] = g[:, 0]
        gr = np.stack([-params.a * cr * cp + params.b * sr * sp, -params.a * cr * sp - params.b * sr * cp], axis=1)
    else:
        gx_n, gy_n = params.gamma_x, params.gamma_y
        nx = np.arange(1, gx_n + 1)
        ny = np.arange(1, gy_n + 1)
        cx = TWO_PI * nx * params.fx
        cy = TWO_PI * ny * FY_FIXED
        argx = np.outer(rho, cx) + params.phases_x
        argy = np.outer(rho, cy) + params.phases_y
        gt = np.zeros((n, 2, 1 + 2 * gx_n + 2 * gy_n))
        gt[:, 0, 0] = np.cos(argx) @ (params.amps_x * TWO_PI * nx) - (np.sin(argx) * rho[:, None]) @ (
            params.amps_x * cx * TWO_PI * nx
        )
        sl_ax = slice(1, 1 + gx_n)
        sl_ay = slice(1 + gx_n, 1 + gx_n + gy_n)
        sl_px = slice(1 + gx_n + gy_n, 1 + 2 * gx_n + gy_n)
        sl_py = slice(1 + 2 * gx_n + gy_n, 1 + 2 * gx_n + 2 * gy_n)
        gt[:, 0, sl_ax] = cx * np.cos(argx)
        gt[:, 1, sl_ay] = cy * np.cos(argy)
        gt[:, 0, sl_px] = -params.amps_x * cx * np.sin(argx)
        gt[:, 1, sl_py] = -params.amps_y * cy * np.sin(argy)
        gr = np.stack([-np.sin(argx) @ (params.amps_x * cx * cx), -np.sin(argy) @ (params.amps_y * cy * cy)], axis=1)

    d_theta = -np.einsum("nd,ndp->np", g, gt) * inv3[:, None]
    d_rho = -np.sum(g * gr, axis=1) * inv3
    return 1.0 / norm, d_theta, d_rho
