"""Deployment loop aligning a kinematic virtual twin with the real vehicle.

Each cycle the real vehicle is localised on the twin's trajectory (recorded
history plus current prediction).  The twin advances zero, one or two steps
depending on where the real vehicle sits relative to the admissible band
``[sigma_V(t-2), sigma_V(t)]``, then replans.  The real vehicle receives a
Stanley steering angle and a feed-forward/feedback acceleration.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .distill.generator import GeneratorConfig, TrajectoryGenerator, TrajectoryPrediction, rollout_autoregressive
from .geometry import CurvilinearState, Path, PathExhaustedError, project_polyline
from .models import (
    DEFAULT_GAMMA_MAX,
    DEFAULT_WHEELBASE,
    ActionBounds,
    ControlInput,
    PlantConfig,
    PlantState,
    RealCommand,
    VehicleState,
    init_plant,
    kinematic_step,
    plant_step,
    wrap_angle,
)
from .policy import assemble_state


class AlignmentEvent(str, enum.Enum):
    NOMINAL = "Nominal"
    FREEZE = "Freeze"
    FAST_FORWARD = "FastForward"
    RESET = "Reset"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class AlignmentConfig:
    K_d: float = 1.5
    K_v: float = 1.0
    ref_offset: int = 1
    freeze_offset: int = 2
    k_e: float = 1.0
    eps_v: float = 0.5
    d_reset: float = 1.0
    dt: float = 0.1
    history_seconds: float = 10.0
    wheelbase: float = DEFAULT_WHEELBASE
    gamma_max: float = DEFAULT_GAMMA_MAX
    bounds: ActionBounds = field(default_factory=ActionBounds)

    def __post_init__(self):
        if self.K_d < 0 or self.K_v < 0:
            raise ValueError("K_d and K_v must be >= 0")
        if not self.freeze_offset > self.ref_offset >= 1:
            raise ValueError("need freeze_offset > ref_offset >= 1")
        if self.dt <= 0 or self.d_reset <= 0:
            raise ValueError("dt and d_reset must be positive")

    @property
    def history_len(self) -> int:
        return int(round(self.history_seconds / self.dt)) + self.freeze_offset + 1


# --------------------------------------------------------------------------
# planners


class Planner(Protocol):
    def plan(self, state: VehicleState, prev: ControlInput, hint: float | None) -> tuple[TrajectoryPrediction, float]:
        """Predicted controls/states from ``state`` and the track arc position used."""


@dataclass
class ModelPlanner:
    """Replans with the trajectory generator along a fixed track."""

    model: TrajectoryGenerator
    track: Path
    v_target: float | None = None

    def plan(self, state, prev, hint):
        cfg = self.model.config
        vt = self.v_target if self.track.v_target is None else None
        s0 = assemble_state(state, prev, self.track, vt, cfg.n_waypoints, cfg.d_s, hint=hint)
        return rollout_autoregressive(self.model, s0, self.track), s0.par.sigma


@dataclass
class PolicyPlanner:
    """Builds a prediction by rolling a step-wise policy through the kinematic model."""

    policy: Callable
    track: Path
    config: GeneratorConfig = field(default_factory=GeneratorConfig)
    v_target: float | None = None

    def plan(self, state, prev, hint):
        cfg = self.config
        vt = self.v_target if self.track.v_target is None else None
        controls, states = [], []
        sigma0 = None
        h = hint
        truncated = False
        for _ in range(cfg.n_horizon):
            try:
                s = assemble_state(state, prev, self.track, vt, cfg.n_waypoints, cfg.d_s, hint=h)
            except PathExhaustedError:
                truncated = True
                break
            if sigma0 is None:
                sigma0 = s.par.sigma
            h = s.par.sigma
            u = self.policy(s)
            state = kinematic_step(state, u, cfg.dt, cfg.wheelbase, forward_only=cfg.forward_only, gamma_max=cfg.gamma_max)
            controls.append((u.a, u.omega))
            states.append(state.as_array())
            prev = u
        if sigma0 is None:
            raise PathExhaustedError("twin is past the track end")
        pred = TrajectoryPrediction(
            np.array(controls).reshape(-1, 2), np.array(states).reshape(-1, 5), len(controls), truncated
        )
        return pred, sigma0


# --------------------------------------------------------------------------
# virtual twin


@dataclass(frozen=True)
class VirtualTwin:
    """Virtual vehicle with its recorded history and current prediction.

    ``hist_states[-1]`` is the current state; ``hist_controls[i]`` is the
    control that moved ``hist_states[i]`` on (NaN for the current state).
    """

    state: VehicleState
    t: int
    hist_states: np.ndarray
    hist_controls: np.ndarray
    hist_arcs: np.ndarray
    pred_controls: np.ndarray
    pred_states: np.ndarray
    prev_control: ControlInput
    track_sigma: float
    consumed: int = 0

    def sigma(self, back: int = 0) -> float:
        """Arc position ``sigma_V(t - back)``."""
        return float(self.hist_arcs[-1 - back])

    def velocity(self, back: int = 0) -> float:
        return float(self.hist_states[-1 - back, 3])

    def trace(self, wheelbase: float):
        """Combined history + prediction: rear points, arcs, headings, controls, speeds, front points, front arcs, front headings."""
        states = np.vstack([self.hist_states, self.pred_states]) if len(self.pred_states) else self.hist_states
        pts = states[:, :2]
        step = np.hypot(*np.diff(self.pred_states[:, :2] if len(self.pred_states) else pts[-1:], axis=0).T)
        if len(self.pred_states):
            first = math.hypot(*(self.pred_states[0, :2] - self.hist_states[-1, :2]))
            pred_arcs = self.hist_arcs[-1] + np.cumsum(np.concatenate([[first], step]))
            arcs = np.concatenate([self.hist_arcs, pred_arcs])
        else:
            arcs = self.hist_arcs.copy()
        nxt = self.pred_controls[:1] if len(self.pred_controls) else np.full((1, 2), np.nan)
        controls = np.vstack([self.hist_controls[:-1], nxt, self.pred_controls[1:], self.pred_controls[-1:]])
        controls = controls[: len(states)]
        theta, gamma = states[:, 2], states[:, 4]
        front = pts + wheelbase * np.column_stack([np.cos(theta), np.sin(theta)])
        fstep = np.hypot(*np.diff(front, axis=0).T)
        farcs = np.concatenate([[0.0], np.cumsum(fstep)]) + arcs[0]
        return pts, arcs, theta, controls, states[:, 3], front, farcs, theta + gamma


def _seed_twin(state: VehicleState, prev: ControlInput, arc: float, cfg: AlignmentConfig, t: int = 0) -> VirtualTwin:
    n = cfg.freeze_offset + 1
    hist = np.tile(state.as_array(), (n, 1))
    controls = np.zeros((n, 2))
    controls[-1] = np.nan
    return VirtualTwin(
        state=state,
        t=t,
        hist_states=hist,
        hist_controls=controls,
        hist_arcs=np.full(n, float(arc)),
        pred_controls=np.zeros((0, 2)),
        pred_states=np.zeros((0, 5)),
        prev_control=prev,
        track_sigma=0.0,
    )


def replan(twin: VirtualTwin, planner: Planner) -> VirtualTwin:
    pred, sigma = planner.plan(twin.state, twin.prev_control, twin.track_sigma if twin.t or twin.track_sigma else None)
    return replace(twin, pred_controls=pred.controls, pred_states=pred.states, track_sigma=sigma)


def advance_twin(twin: VirtualTwin, n_steps: int, cfg: AlignmentConfig, gen: GeneratorConfig) -> VirtualTwin:
    """Consume ``n_steps`` predicted controls through the kinematic model."""
    if n_steps == 0:
        return twin
    if len(twin.pred_controls) < n_steps:
        raise PathExhaustedError("twin prediction ran out of controls")
    state = twin.state
    hist_s, hist_c, hist_a = [twin.hist_states], [twin.hist_controls[:-1]], [twin.hist_arcs]
    arc = twin.sigma()
    new_states, new_controls, new_arcs = [], [], []
    for i in range(n_steps):
        a, w = twin.pred_controls[i]
        u = ControlInput(float(a), float(w))
        nxt = kinematic_step(state, u, gen.dt, gen.wheelbase, forward_only=gen.forward_only, gamma_max=gen.gamma_max)
        arc += math.hypot(nxt.x - state.x, nxt.y - state.y)
        new_controls.append((u.a, u.omega))
        new_states.append(nxt.as_array())
        new_arcs.append(arc)
        state = nxt
    keep = cfg.history_len
    states = np.vstack([twin.hist_states, new_states])[-keep:]
    controls = np.vstack([twin.hist_controls[:-1], new_controls, [[np.nan, np.nan]]])[-keep:]
    arcs = np.concatenate([twin.hist_arcs, new_arcs])[-keep:]
    return replace(
        twin,
        state=state,
        t=twin.t + n_steps,
        hist_states=states,
        hist_controls=controls,
        hist_arcs=arcs,
        pred_controls=twin.pred_controls[n_steps:],
        pred_states=twin.pred_states[n_steps:],
        prev_control=ControlInput(*new_controls[-1]),
        consumed=twin.consumed + n_steps,
    )


# --------------------------------------------------------------------------
# control laws


def classify_alignment(sigma_R: float, twin: VirtualTwin, cfg: AlignmentConfig = AlignmentConfig()) -> AlignmentEvent:
    """Freeze below ``sigma_V(t-2)``, fast-forward beyond ``sigma_V(t)``; ties are nominal."""
    if sigma_R < twin.sigma(cfg.freeze_offset):
        return AlignmentEvent.FREEZE
    if sigma_R > twin.sigma(0):
        return AlignmentEvent.FAST_FORWARD
    return AlignmentEvent.NOMINAL


def nearest_index(arcs: np.ndarray, sigma: float) -> int:
    """Trajectory vertex closest in arc length to ``sigma`` (ties: larger index)."""
    gap = np.abs(arcs - sigma)
    best = gap.min()
    return int(np.flatnonzero(gap <= best + 1e-12)[-1])


def longitudinal_command(
    twin: VirtualTwin, real_cs: CurvilinearState, real_v: float, cfg: AlignmentConfig = AlignmentConfig(), a_ff: float | None = None
) -> float:
    """Feed-forward virtual acceleration plus position and speed feedback, clamped.

    ``a_ff`` overrides the feed-forward term (normally the twin's control at
    the trajectory point nearest the real vehicle).
    """
    if a_ff is None:
        _, arcs, _, controls, *_ = twin.trace(cfg.wheelbase)
        a_ff = float(controls[nearest_index(arcs, real_cs.sigma), 0])
        if not math.isfinite(a_ff):
            a_ff = 0.0
    k = cfg.ref_offset
    a = a_ff + cfg.K_d * (twin.sigma(k) - real_cs.sigma) + cfg.K_v * (twin.velocity(k) - real_v)
    return min(max(a, cfg.bounds.a_min), cfg.bounds.a_max)


def stanley_steering(cs_front: CurvilinearState, v: float, cfg: AlignmentConfig = AlignmentConfig()) -> float:
    """Heading correction plus arctangent cross-track term, saturated at ``gamma_max``.

    Positive ``d`` (vehicle left of the path) steers right.
    """
    heading_term = -cs_front.delta_psi
    cross_track = math.atan2(cfg.k_e * (-cs_front.d), v + cfg.eps_v)
    return min(max(heading_term + cross_track, -cfg.gamma_max), cfg.gamma_max)


def front_axle_pose(state: VehicleState, wheelbase: float) -> tuple[float, float, float]:
    return (
        state.x + wheelbase * math.cos(state.theta),
        state.y + wheelbase * math.sin(state.theta),
        state.theta,
    )


# --------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class LogRecord:
    t: float
    event: AlignmentEvent
    sigma_V: float
    sigma_ref: float
    sigma_lower: float
    sigma_R: float
    d: float
    delta_psi: float
    v_V: float
    v_R: float
    a_cmd: float
    gamma_cmd: float
    a_virtual: float
    consumed: int = 0

    CSV_COLUMNS = (
        "t", "event", "sigma_V", "sigma_ref", "sigma_lower", "sigma_R", "d",
        "delta_psi", "v_V", "v_R", "a_cmd", "gamma_cmd", "a_virtual",
    )


@dataclass(frozen=True)
class World:
    twin: VirtualTwin
    plant: PlantState
    planner: Planner
    plant_cfg: PlantConfig
    gen: GeneratorConfig
    step: int = 0
    real_hint: float | None = None
    front_hint: float | None = None


def init_world(
    planner: Planner,
    real: VehicleState,
    plant_cfg: PlantConfig,
    gen: GeneratorConfig = GeneratorConfig(),
    cfg: AlignmentConfig = AlignmentConfig(),
) -> World:
    """Start the twin at the real vehicle's state and plan its first trajectory."""
    twin = replan(_seed_twin(real, ControlInput(), 0.0, cfg), planner)
    return World(twin, init_plant(real, plant_cfg), planner, plant_cfg, gen)


def step_alignment(world: World, cfg: AlignmentConfig = AlignmentConfig()) -> tuple[World, LogRecord]:
    """One runtime cycle: localise, classify, advance the twin, command and move the real vehicle.

    Localisation, band, reference point and feed-forward term all refer to
    the twin as it stood when the real vehicle was measured (cycle start);
    the twin then advances while the real vehicle executes its command.
    """
    twin = world.twin
    real = world.plant.vehicle
    L = cfg.wheelbase

    pts, arcs, heads, controls, _, front, farcs, fheads = twin.trace(L)
    cs = project_polyline(pts, arcs, real.pose, heads, hint=world.real_hint, extrapolate=True)
    event = classify_alignment(cs.sigma, twin, cfg)

    a_ff = float(controls[nearest_index(arcs, cs.sigma), 0])
    if not math.isfinite(a_ff):
        a_ff = 0.0
    a_cmd = longitudinal_command(twin, cs, real.v, cfg, a_ff=a_ff)

    cs_f = project_polyline(front, farcs, front_axle_pose(real, L), fheads, hint=world.front_hint)
    gamma_cmd = stanley_steering(cs_f, real.v, cfg)

    record = LogRecord(
        t=world.step * cfg.dt,
        event=event,
        sigma_V=twin.sigma(0),
        sigma_ref=twin.sigma(cfg.ref_offset),
        sigma_lower=twin.sigma(cfg.freeze_offset),
        sigma_R=cs.sigma,
        d=cs.d,
        delta_psi=cs.delta_psi,
        v_V=twin.velocity(cfg.ref_offset),
        v_R=real.v,
        a_cmd=a_cmd,
        gamma_cmd=gamma_cmd,
        a_virtual=a_ff,
        consumed=0,
    )

    n_adv = {AlignmentEvent.FREEZE: 0, AlignmentEvent.NOMINAL: 1, AlignmentEvent.FAST_FORWARD: 2}[event]
    if n_adv:
        twin = replan(advance_twin(twin, n_adv, cfg, world.gen), world.planner)
    record = replace(record, consumed=n_adv)

    plant = plant_step(world.plant, RealCommand(a_cmd, gamma_cmd), world.plant_cfg)

    real_hint, front_hint = cs.sigma, cs_f.sigma
    if abs(cs.d) > cfg.d_reset:
        record = replace(record, event=AlignmentEvent.RESET)
        prev = ControlInput(plant.a_eff, plant.omega_eff)
        seeded = _seed_twin(plant.vehicle, prev, twin.sigma(0), cfg, t=twin.t)
        seeded = replace(seeded, track_sigma=twin.track_sigma, consumed=twin.consumed)
        twin = replan(seeded, world.planner)
        real_hint, front_hint = None, None
    world = replace(world, twin=twin, plant=plant, step=world.step + 1, real_hint=real_hint, front_hint=front_hint)
    return world, record


@dataclass
class RunResult:
    records: list
    world: World
    reason: str


def run_alignment(
    world: World,
    cfg: AlignmentConfig = AlignmentConfig(),
    max_time: float = 600.0,
    stop_hold: float = 3.0,
    stop_speed: float = 0.05,
    on_step: Callable | None = None,
) -> RunResult:
    """Cycle :func:`step_alignment` until the track ends or the real vehicle rests at its end."""
    records = []
    still = 0
    reason = "max_time"
    track_len = getattr(getattr(world.planner, "track", None), "length", math.inf)
    for _ in range(int(round(max_time / cfg.dt))):
        try:
            world, rec = step_alignment(world, cfg)
        except PathExhaustedError:
            reason = "track_end"
            break
        records.append(rec)
        if on_step:
            on_step(world, rec)
        # the twin may stay frozen just ahead of a real vehicle that has stopped
        near_end = world.twin.track_sigma > track_len - 10.0
        resting = world.plant.vehicle.v < stop_speed
        # away from the end only a twin at rest counts: neither event can move it
        if resting and (near_end or world.twin.state.v == 0.0):
            still += 1
            if still * cfg.dt >= stop_hold:
                reason = "stopped" if near_end else "stalled"
                break
        else:
            still = 0
    return RunResult(records, world, reason)
