"""Vehicle state types, the kinematic bicycle update and the mismatched plant.

The kinematic model uses the rear axle as reference point.  All functions in
this module are pure: they never mutate their arguments.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_WHEELBASE = 2.9
DEFAULT_DT = 0.1
DEFAULT_GAMMA_MAX = math.pi / 6
DEFAULT_A_CP_MAX = 2.5


class InvalidStateError(ValueError):
    """Raised when a state carries a non-finite field."""


class InvalidCommandError(ValueError):
    """Raised when a plant command carries a non-finite field."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(angle, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    w = np.remainder(np.asarray(angles, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    return np.where(w <= -math.pi, w + 2.0 * math.pi, w)


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0
    gamma: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v, self.gamma])

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        x, y, theta, v, gamma = (float(c) for c in arr)
        return cls(x, y, theta, v, gamma)

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)

    def is_finite(self) -> bool:
        return all(math.isfinite(c) for c in (self.x, self.y, self.theta, self.v, self.gamma))


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.omega])


@dataclass(frozen=True)
class RealCommand:
    """Acceleration plus a steering *angle* set-point, as sent to the real vehicle."""

    a: float = 0.0
    gamma_cmd: float = 0.0


@dataclass(frozen=True)
class ActionBounds:
    a_min: float = -2.0
    a_max: float = 2.0
    omega_min: float = -0.5
    omega_max: float = 0.5

    def __post_init__(self):
        if not self.a_min < self.a_max:
            raise ValueError(f"a_min ({self.a_min}) must be < a_max ({self.a_max})")
        if not self.omega_min < self.omega_max:
            raise ValueError(
                f"omega_min ({self.omega_min}) must be < omega_max ({self.omega_max})"
            )

    @property
    def low(self) -> np.ndarray:
        return np.array([self.a_min, self.omega_min])

    @property
    def high(self) -> np.ndarray:
        return np.array([self.a_max, self.omega_max])


def _clip_component(value: float, lo: float, hi: float) -> tuple[float, bool]:
    if math.isnan(value):
        # no nearest bound exists for NaN: hold (zero clipped into range)
        return min(max(0.0, lo), hi), True
    if math.isinf(value):
        return (hi if value > 0 else lo), True
    return min(max(value, lo), hi), False


def clamp_action(u: ControlInput, b: ActionBounds = ActionBounds()) -> ControlInput:
    """Project ``u`` onto the action box.

    Non-finite components are replaced by the nearest bound (NaN holds at
    zero) and a :class:`RuntimeWarning` is emitted.
    """
    a, bad_a = _clip_component(u.a, b.a_min, b.a_max)
    omega, bad_w = _clip_component(u.omega, b.omega_min, b.omega_max)
    if bad_a or bad_w:
        warnings.warn(f"non-finite control clipped: {u}", RuntimeWarning, stacklevel=2)
    return ControlInput(a, omega)


def kinematic_step(
    state: VehicleState,
    u: ControlInput,
    dt: float = DEFAULT_DT,
    L_b: float = DEFAULT_WHEELBASE,
    *,
    forward_only: bool = True,
    gamma_max: float | None = None,
) -> VehicleState:
    """Advance the kinematic bicycle by one explicit Euler step.

    Position and heading are integrated from the pre-update speed, steering
    angle and heading; speed and steering angle then integrate the inputs.
    ``forward_only`` clamps the new speed at zero and ``gamma_max`` (if given)
    saturates the new steering angle.
    """
    if not state.is_finite():
        raise InvalidStateError(f"non-finite vehicle state: {state}")
    if not (math.isfinite(u.a) and math.isfinite(u.omega)):
        raise InvalidStateError(f"non-finite control input: {u}")
    if dt <= 0 or L_b <= 0:
        raise ValueError("dt and L_b must be positive")

    x = state.x + dt * state.v * math.cos(state.theta)
    y = state.y + dt * state.v * math.sin(state.theta)
    theta = state.theta + dt * state.v / L_b * math.tan(state.gamma)
    v = state.v + dt * u.a
    gamma = state.gamma + dt * u.omega
    if forward_only and v < 0.0:
        v = 0.0
    if gamma_max is not None:
        gamma = min(max(gamma, -gamma_max), gamma_max)
    return VehicleState(x, y, wrap_angle(theta), v, gamma)


def kinematic_jacobian(
    state: VehicleState, u: ControlInput, dt: float = DEFAULT_DT, L_b: float = DEFAULT_WHEELBASE
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form Jacobians of the unclamped Euler update.

    Returns ``(A, B)`` with ``A = d next / d state`` (5x5) and
    ``B = d next / d control`` (5x2), state ordered (x, y, theta, v, gamma).
    """
    c, s = math.cos(state.theta), math.sin(state.theta)
    t = math.tan(state.gamma)
    A = np.eye(5)
    A[0, 2] = -dt * state.v * s
    A[0, 3] = dt * c
    A[1, 2] = dt * state.v * c
    A[1, 3] = dt * s
    A[2, 3] = dt * t / L_b
    A[2, 4] = dt * state.v / L_b * (1.0 + t * t)
    B = np.zeros((5, 2))
    B[3, 0] = dt
    B[4, 1] = dt
    return A, B


def admissible_speed(
    v_target: float, gamma: float, L_b: float = DEFAULT_WHEELBASE, a_cp_max: float = DEFAULT_A_CP_MAX
) -> float:
    """Target speed capped by the centripetal limit of the current steering angle."""
    if a_cp_max <= 0:
        raise ValueError("a_cp_max must be positive")
    return speed_for_curvature(v_target, math.tan(gamma) / L_b, a_cp_max)


def speed_for_curvature(v_target: float, kappa: float, a_cp_max: float = DEFAULT_A_CP_MAX) -> float:
    if kappa == 0.0:
        return v_target
    return min(v_target, math.sqrt(a_cp_max / abs(kappa)))


# --------------------------------------------------------------------------
# mismatched plant


@dataclass(frozen=True)
class PlantConfig:
    wheelbase: float = DEFAULT_WHEELBASE
    dt: float = DEFAULT_DT
    tau_a: float = 0.0
    tau_omega: float = 0.0
    command_delay: int = 0
    wheelbase_error: float = 1.0
    process_noise_std: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)
    gamma_max: float = DEFAULT_GAMMA_MAX
    forward_only: bool = True
    bounds: ActionBounds = field(default_factory=ActionBounds)
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        if self.tau_a < 0 or self.tau_omega < 0:
            raise ValueError("actuator time constants must be >= 0")
        if self.command_delay < 0 or int(self.command_delay) != self.command_delay:
            raise ValueError("command_delay must be a non-negative integer")
        if self.wheelbase_error <= 0:
            raise ValueError("wheelbase_error must be positive")
        noise = self.process_noise_std
        if np.isscalar(noise):
            object.__setattr__(self, "process_noise_std", (float(noise),) * 5)
        elif len(noise) != 5:
            raise ValueError("process_noise_std needs one entry per state component")
        if any(s < 0 for s in self.process_noise_std):
            raise ValueError("process_noise_std must be >= 0")
        if not 0 < self.gamma_max < math.pi / 2:
            raise ValueError("gamma_max must lie in (0, pi/2)")

    @property
    def has_noise(self) -> bool:
        return any(s > 0 for s in self.process_noise_std)


@dataclass(frozen=True)
class PlantState:
    vehicle: VehicleState
    queue: tuple = ()
    a_eff: float = 0.0
    omega_eff: float = 0.0
    rng_state: dict | None = None
    steps: int = 0


def init_plant(vehicle: VehicleState, cfg: PlantConfig) -> PlantState:
    rng_state = None
    if cfg.has_noise:
        rng_state = np.random.default_rng(cfg.seed).bit_generator.state
    return PlantState(vehicle=vehicle, queue=(None,) * cfg.command_delay, rng_state=rng_state)


def _first_order(prev: float, target: float, tau: float, dt: float) -> float:
    if tau == 0.0:
        return target
    return prev + (1.0 - math.exp(-dt / tau)) * (target - prev)


def plant_step(plant: PlantState, command, cfg: PlantConfig) -> PlantState:
    """Advance the stand-in real vehicle by one step.

    ``command`` is a :class:`ControlInput` (acceleration, steering rate) or a
    :class:`RealCommand` (acceleration, steering angle).  Angle commands are
    turned into a rate, limited to the steering-rate bounds, when they leave
    the delay line.
    """
    if isinstance(command, ControlInput):
        vals = (command.a, command.omega)
    elif isinstance(command, RealCommand):
        vals = (command.a, command.gamma_cmd)
    else:
        raise TypeError(f"unsupported plant command {type(command).__name__}")
    if not all(math.isfinite(v) for v in vals):
        raise InvalidCommandError(f"non-finite command: {command}")

    queue = deque(plant.queue)
    queue.append(command)
    active = queue.popleft()
    veh = plant.vehicle
    b = cfg.bounds

    if active is None:
        a_cmd, omega_cmd = 0.0, 0.0
    elif isinstance(active, RealCommand):
        a_cmd = active.a
        omega_cmd = min(max((active.gamma_cmd - veh.gamma) / cfg.dt, b.omega_min), b.omega_max)
    else:
        a_cmd, omega_cmd = active.a, active.omega

    a_eff = _first_order(plant.a_eff, a_cmd, cfg.tau_a, cfg.dt)
    omega_eff = _first_order(plant.omega_eff, omega_cmd, cfg.tau_omega, cfg.dt)

    L_eff = cfg.wheelbase if cfg.wheelbase_error == 1.0 else cfg.wheelbase * cfg.wheelbase_error
    nxt = kinematic_step(
        veh,
        ControlInput(a_eff, omega_eff),
        cfg.dt,
        L_eff,
        forward_only=cfg.forward_only,
        gamma_max=cfg.gamma_max,
    )
    rng_state = plant.rng_state
    if cfg.has_noise:
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        noise = rng.normal(0.0, cfg.process_noise_std)
        arr = nxt.as_array() + noise
        arr[2] = wrap_angle(arr[2])
        if cfg.forward_only:
            arr[3] = max(arr[3], 0.0)
        arr[4] = min(max(arr[4], -cfg.gamma_max), cfg.gamma_max)
        nxt = VehicleState.from_array(arr)
        rng_state = rng.bit_generator.state
    return replace(
        plant,
        vehicle=nxt,
        queue=tuple(queue),
        a_eff=a_eff,
        omega_eff=omega_eff,
        rng_state=rng_state,
        steps=plant.steps + 1,
    )
