"""Agent state assembly, reward evaluation and the scripted expert policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Path, PathExhaustedError, discrete_curvature, project_curvilinear
from .models import (
    DEFAULT_A_CP_MAX,
    DEFAULT_DT,
    DEFAULT_WHEELBASE,
    ActionBounds,
    ControlInput,
    VehicleState,
    admissible_speed,
    clamp_action,
    speed_for_curvature,
)

N_WAYPOINTS = 80
WAYPOINT_SPACING = 1.0
OBS_DIM = 7


@dataclass(frozen=True)
class Observation:
    x: float
    y: float
    theta: float
    v: float
    gamma: float
    a_prev: float
    omega_prev: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.theta, self.v, self.gamma, self.a_prev, self.omega_prev]
        )

    @property
    def vehicle(self) -> VehicleState:
        return VehicleState(self.x, self.y, self.theta, self.v, self.gamma)


@dataclass(frozen=True)
class Parameterization:
    v_target: float
    waypoints: np.ndarray  # (N_w, 2) in the vehicle frame
    sigma: float = 0.0  # arc position of the vehicle on its path


@dataclass(frozen=True)
class AgentState:
    obs: Observation
    par: Parameterization

    @property
    def n_waypoints(self) -> int:
        return len(self.par.waypoints)

    def flatten(self) -> np.ndarray:
        """``[x, y, theta, v, gamma, a_prev, omega_prev, v_target, wx1, wy1, ...]``."""
        return np.concatenate(
            [self.obs.as_array(), [self.par.v_target], self.par.waypoints.reshape(-1)]
        )

    @classmethod
    def unflatten(cls, vec, sigma: float = 0.0) -> "AgentState":
        vec = np.asarray(vec, dtype=float)
        obs = Observation(*(float(c) for c in vec[:OBS_DIM]))
        wp = vec[OBS_DIM + 1 :].reshape(-1, 2).copy()
        return cls(obs, Parameterization(float(vec[OBS_DIM]), wp, sigma))


def state_dim(n_waypoints: int = N_WAYPOINTS) -> int:
    return OBS_DIM + 1 + 2 * n_waypoints


def to_vehicle_frame(points: np.ndarray, x: float, y: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    dx = points[..., 0] - x
    dy = points[..., 1] - y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def assemble_state(
    vehicle: VehicleState,
    prev: ControlInput,
    path: Path,
    v_target: float | None = None,
    n_waypoints: int = N_WAYPOINTS,
    d_s: float = WAYPOINT_SPACING,
    hint: float | None = None,
) -> AgentState:
    """Build the agent state for ``vehicle`` following ``path``.

    Waypoints are sampled at ``sigma + i * d_s`` (i = 1..n) and expressed in
    the vehicle frame; past the path end the last waypoint repeats.  With
    ``v_target=None`` the path's own speed column is used.
    """
    cs = project_curvilinear(vehicle.pose, path, hint=hint)
    if cs.beyond_end:
        raise PathExhaustedError(f"vehicle at ({vehicle.x:.2f}, {vehicle.y:.2f}) is past the path end")
    s = cs.sigma + d_s * np.arange(1, n_waypoints + 1)
    world = path.point_at(s)
    if v_target is None:
        v_target = path.target_speed_at(cs.sigma)
    obs = Observation(vehicle.x, vehicle.y, vehicle.theta, vehicle.v, vehicle.gamma, prev.a, prev.omega)
    wp = to_vehicle_frame(world, vehicle.x, vehicle.y, vehicle.theta)
    return AgentState(obs, Parameterization(float(v_target), wp, cs.sigma))


# --------------------------------------------------------------------------
# reward


def huber(x, delta: float = 1.0, alpha: float = 0.25):
    """Scaled Huber penalty; works on scalars and arrays."""
    ax = np.abs(x)
    out = alpha * np.where(ax <= delta, 0.5 * np.square(x) / delta, ax - 0.5 * delta)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class RewardWeights:
    R_dev: float = -1.0
    R_vel: float = -1.0
    R_progress: float = 0.5
    R_acc: float = -0.1
    R_omega: float = -0.1
    R_jerk: float = -0.2
    R_delta_omega: float = -0.2
    R_hold: float = -1.0
    delta: float = 1.0
    alpha: float = 0.25
    a_cp_max: float = DEFAULT_A_CP_MAX

    def __post_init__(self):
        if self.delta <= 0 or self.alpha <= 0:
            raise ValueError("delta and alpha must be positive")
        for name in ("R_dev", "R_vel", "R_acc", "R_omega", "R_jerk", "R_delta_omega", "R_hold"):
            if getattr(self, name) > 0:
                raise ValueError(f"{name} is a penalty weight and must be <= 0")
        if self.R_progress < 0:
            raise ValueError("R_progress must be >= 0")
        if self.a_cp_max <= 0:
            raise ValueError("a_cp_max must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    dev: float
    vel: float
    progress: float
    acc: float
    omega: float
    jerk: float
    delta_omega: float
    hold: float
    total: float

    def terms(self) -> tuple[float, ...]:
        return (self.dev, self.vel, self.progress, self.acc, self.omega, self.jerk, self.delta_omega, self.hold)


def compute_reward(
    d_t: float,
    v_t: float,
    v_target: float,
    gamma: float,
    L_b: float,
    u_t: ControlInput,
    u_prev: ControlInput,
    dt: float,
    w: RewardWeights = RewardWeights(),
) -> RewardBreakdown:
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = lambda x: huber(x, w.delta, w.alpha)  # noqa: E731
    v_max = admissible_speed(v_target, gamma, L_b, w.a_cp_max)
    terms = (
        w.R_dev * h(d_t),
        w.R_vel * h(max(0.0, v_t - v_max)),
        w.R_progress * min(v_t, v_max) * dt,
        w.R_acc * h(u_t.a),
        w.R_omega * h(u_t.omega),
        w.R_jerk * h(u_t.a - u_prev.a),
        w.R_delta_omega * h(u_t.omega - u_prev.omega),
        w.R_hold * (1.0 if (v_max <= 0 and v_t > 0) else 0.0),
    )
    return RewardBreakdown(*terms, total=math.fsum(terms))


# --------------------------------------------------------------------------
# scripted expert


@dataclass(frozen=True)
class ExpertGains:
    k_e: float = 1.0  # cross-track gain
    eps_v: float = 0.5  # speed softening [m/s]
    heading_span: float = 2.0  # half-window for the smoothed path heading [m]
    k_v: float = 2.5  # speed feedback gain [1/s]
    smoothing: int = 5  # moving-average window over waypoints
    a_brake: float = 1.0  # planning deceleration for curves and path end [m/s^2]
    curvature_base: int = 4  # point spacing for lookahead curvature estimate
    lookahead: float = 60.0  # [m]
    stop_margin: float = 1.0  # stop this far before the path end [m]
    a_cp_max: float = DEFAULT_A_CP_MAX
    wheelbase: float = DEFAULT_WHEELBASE
    dt: float = DEFAULT_DT
    bounds: ActionBounds = ActionBounds()


def _polyline_point_and_heading(pts: np.ndarray, px: float, py: float, span: float):
    """Lateral offset (left positive) of ``(px, py)`` from ``pts`` and a chord-smoothed heading."""
    seg = np.diff(pts, axis=0)
    l2 = np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-12)
    off = np.array([px, py]) - pts[:-1]
    t = np.clip(np.einsum("ij,ij->i", off, seg) / l2, 0.0, 1.0)
    foot = pts[:-1] + t[:, None] * seg
    dist2 = np.sum((foot - [px, py]) ** 2, axis=1)
    k = int(np.argmin(dist2))
    arcs = np.concatenate([[0.0], np.cumsum(np.sqrt(l2))])
    s = arcs[k] + t[k] * np.sqrt(l2[k])
    a = np.array([np.interp(s - span, arcs, pts[:, 0]), np.interp(s - span, arcs, pts[:, 1])])
    b = np.array([np.interp(s + span, arcs, pts[:, 0]), np.interp(s + span, arcs, pts[:, 1])])
    chord = b - a
    if chord @ chord < 1e-12:
        chord = seg[k]
    heading = math.atan2(chord[1], chord[0])
    u = seg[k] / math.sqrt(l2[k])
    o = np.array([px, py]) - foot[k]
    d = u[0] * o[1] - u[1] * o[0]
    return d, heading, s


def _moving_average(pts: np.ndarray, n: int) -> np.ndarray:
    pad = n // 2
    padded = np.concatenate([np.repeat(pts[:1], pad, 0), pts, np.repeat(pts[-1:], pad, 0)])
    kernel = np.ones(n) / n
    out = np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in (0, 1)], axis=1)
    out[0] = pts[0]
    return out


def expert_policy(s: AgentState, g: ExpertGains = ExpertGains()) -> ControlInput:
    """Stanley-style steering plus curvature-aware speed tracking.

    Stands in for a trained step-wise policy; it reads nothing but the agent
    state, so a learned policy with the same signature is a drop-in.
    """
    v, gamma = s.obs.v, s.obs.gamma
    pts = np.vstack([[0.0, 0.0], s.par.waypoints])
    if g.smoothing > 1:
        pts = _moving_average(pts, g.smoothing)

    # lateral: front-axle cross-track error and smoothed path heading
    d, psi, _ = _polyline_point_and_heading(pts, g.wheelbase, 0.0, g.heading_span)
    gamma_des = psi + math.atan2(g.k_e * (-d), v + g.eps_v)
    omega = (gamma_des - gamma) / g.dt

    # longitudinal: speed limit from curvature ahead and from the path end
    v_max = max(s.par.v_target, 0.0)
    step = np.hypot(*np.diff(pts, axis=0).T)
    arcs = np.concatenate([[0.0], np.cumsum(step)])
    moving = np.flatnonzero(step > 1e-9)
    end_arc = arcs[moving[-1] + 1] if len(moving) else 0.0
    a_stop = math.inf
    if len(moving) < len(step):
        s_rem = max(end_arc - g.stop_margin, 0.0)
        v_max = min(v_max, math.sqrt(2.0 * g.a_brake * s_rem))
        if v * v >= 2.0 * g.a_brake * s_rem:
            # constant deceleration that ends exactly at the stop point
            a_stop = -v * v / (2.0 * s_rem) if s_rem > 0 else -math.inf
            a_stop = max(a_stop, -v / g.dt)
    m = g.curvature_base
    ahead = pts[: int(np.searchsorted(arcs, g.lookahead)) + 1]
    if len(ahead) > 2 * m:
        sub = ahead[::m]
        sub_arcs = arcs[: len(ahead)][::m]
        if len(sub) >= 3:
            chord = np.hypot(*np.diff(sub, axis=0).T)
            ok = (chord[:-1] > 1e-6) & (chord[1:] > 1e-6)
            kappa = np.zeros(len(sub) - 2)
            if ok.any():
                with np.errstate(divide="ignore", invalid="ignore"):
                    kappa = np.where(ok, discrete_curvature(sub), 0.0)
            for kap, dist in zip(np.abs(kappa), sub_arcs[1:-1]):
                v_c = speed_for_curvature(v_max, kap, g.a_cp_max)
                v_max = min(v_max, math.sqrt(v_c * v_c + 2.0 * g.a_brake * dist))
    v_max = admissible_speed(v_max, gamma, g.wheelbase, g.a_cp_max) if v_max > 0 else v_max
    a = min(g.k_v * (v_max - v), a_stop)
    return clamp_action(ControlInput(a, omega), g.bounds)
