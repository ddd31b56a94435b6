"""Chunked trajectory generator: configuration, numpy inference and model files.

Model file layout (little endian)::

    magic    4 bytes  b"TWGM"
    version  uint32   (currently 1)
    hlen     uint32   length of the JSON header in bytes
    header   hlen bytes of UTF-8 JSON (sorted keys) with
             "config"      GeneratorConfig fields
             "activation"  activation tag, e.g. "silu"
             "arrays"      list of [name, shape] in storage order
    payload  float64 arrays, C order, concatenated in header order:
             feat_mean, feat_std, W0, b0, W1, b1, ...

``Wi`` has shape (fan_out, fan_in), i.e. ``y = W @ x + b``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import Path, PathExhaustedError
from ..models import DEFAULT_GAMMA_MAX, ActionBounds, ControlInput, VehicleState, kinematic_step, wrap_angles
from ..policy import N_WAYPOINTS, OBS_DIM, WAYPOINT_SPACING, AgentState, assemble_state

MODEL_MAGIC = b"TWGM"
MODEL_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_horizon: int = 40
    chunk: int = 10
    dt: float = 0.1
    hidden: tuple[int, ...] = (512, 512, 512, 512)
    activation: str = "silu"
    n_waypoints: int = N_WAYPOINTS
    d_s: float = WAYPOINT_SPACING
    wheelbase: float = 2.9
    gamma_max: float = DEFAULT_GAMMA_MAX
    forward_only: bool = True
    bounds: ActionBounds = field(default_factory=ActionBounds)

    def __post_init__(self):
        if self.chunk <= 0 or self.n_horizon <= 0:
            raise ConfigurationError("n_horizon and chunk must be positive")
        if self.n_horizon % self.chunk:
            raise ConfigurationError(
                f"n_horizon ({self.n_horizon}) must be divisible by chunk ({self.chunk})"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def n_inferences(self) -> int:
        return self.n_horizon // self.chunk

    @property
    def input_dim(self) -> int:
        # v, gamma, a_prev, omega_prev, v_target + vehicle-frame waypoints
        return 5 + 2 * self.n_waypoints

    @property
    def output_dim(self) -> int:
        return 2 * self.chunk

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if isinstance(d.get("bounds"), dict):
            d["bounds"] = ActionBounds(**d["bounds"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def _silu(x):
    # x * sigmoid(x) written via tanh so large |x| cannot overflow
    return 0.5 * x * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {"silu": _silu, "tanh": np.tanh}


def features(flat_state: np.ndarray) -> np.ndarray:
    """Network input from flattened agent state(s); drops absolute x, y, theta."""
    return np.asarray(flat_state, dtype=float)[..., 3:]


@dataclass
class TrajectoryGenerator:
    """Fully connected generator mapping a (normalised) state to ``chunk`` controls."""

    config: GeneratorConfig
    weights: list  # [(W, b), ...]
    feat_mean: np.ndarray
    feat_std: np.ndarray

    @classmethod
    def init(cls, config: GeneratorConfig, seed: int = 0, zero_last: bool = False) -> "TrajectoryGenerator":
        rng = np.random.default_rng(seed)
        dims = [config.input_dim, *config.hidden, config.output_dim]
        weights = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            W = rng.uniform(-bound, bound, (fan_out, fan_in))
            b = rng.uniform(-bound, bound, fan_out)
            if zero_last and i == len(dims) - 2:
                W, b = np.zeros_like(W), np.zeros_like(b)
            weights.append((W, b))
        return cls(config, weights, np.zeros(config.input_dim), np.ones(config.input_dim))

    def raw(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=float)
        if feats.shape[-1] != self.config.input_dim:
            raise ConfigurationError(
                f"state has {feats.shape[-1]} features, model expects {self.config.input_dim}"
            )
        act = ACTIVATIONS[self.config.activation]
        h = (feats - self.feat_mean) / self.feat_std
        for W, b in self.weights[:-1]:
            h = act(h @ W.T + b)
        W, b = self.weights[-1]
        return h @ W.T + b

    def controls(self, feats: np.ndarray) -> np.ndarray:
        """Bounded controls of shape (..., chunk, 2)."""
        z = np.tanh(self.raw(feats))
        k = self.config.chunk
        b = self.config.bounds
        a = 0.5 * (b.a_max + b.a_min) + 0.5 * (b.a_max - b.a_min) * z[..., :k]
        w = 0.5 * (b.omega_max + b.omega_min) + 0.5 * (b.omega_max - b.omega_min) * z[..., k:]
        return np.stack([a, w], axis=-1)


def predict_chunk(model: TrajectoryGenerator, s: AgentState) -> list[ControlInput]:
    """``chunk`` bounded controls for agent state ``s``."""
    u = model.controls(features(s.flatten()))
    return [ControlInput(float(a), float(w)) for a, w in u]


@dataclass(frozen=True)
class TrajectoryPrediction:
    controls: np.ndarray  # (n, 2): a, omega
    states: np.ndarray  # (n, 5): state after each control
    n_inferences: int
    truncated: bool = False

    @property
    def poses(self) -> np.ndarray:
        return self.states[:, :3]

    def __len__(self):
        return len(self.controls)


def rollout_autoregressive(
    model: TrajectoryGenerator,
    s0: AgentState,
    path: Path,
    cfg: GeneratorConfig | None = None,
) -> TrajectoryPrediction:
    """Predict ``n_horizon`` controls by alternating inference and integration.

    Between chunks the agent state is rebuilt from the integrated state and
    waypoints re-sampled from ``path``.  Running past the path end truncates
    the prediction and sets ``truncated``.
    """
    cfg = cfg or model.config
    if cfg.n_horizon % cfg.chunk:
        raise ConfigurationError("n_horizon must be divisible by chunk")
    state = s0.obs.vehicle
    s = s0
    controls, states = [], []
    n_inf = 0
    truncated = False
    for j in range(cfg.n_inferences):
        if j > 0:
            prev = ControlInput(*controls[-1])
            v_target = None if path.v_target is not None else s0.par.v_target
            try:
                s = assemble_state(state, prev, path, v_target, cfg.n_waypoints, cfg.d_s, hint=s.par.sigma)
            except PathExhaustedError:
                truncated = True
                break
        u = model.controls(features(s.flatten()))[: cfg.chunk]
        n_inf += 1
        for a, w in u:
            state = kinematic_step(
                state,
                ControlInput(float(a), float(w)),
                cfg.dt,
                cfg.wheelbase,
                forward_only=cfg.forward_only,
                gamma_max=cfg.gamma_max,
            )
            controls.append((float(a), float(w)))
            states.append(state.as_array())
    return TrajectoryPrediction(
        np.array(controls).reshape(-1, 2), np.array(states).reshape(-1, 5), n_inf, truncated
    )


def integrate_controls(
    s0: VehicleState, controls: np.ndarray, cfg: GeneratorConfig = GeneratorConfig()
) -> np.ndarray:
    """States (n, 5) obtained by integrating ``controls`` from ``s0``."""
    out = []
    state = s0
    for a, w in np.asarray(controls, dtype=float):
        state = kinematic_step(
            state, ControlInput(a, w), cfg.dt, cfg.wheelbase, forward_only=cfg.forward_only, gamma_max=cfg.gamma_max
        )
        out.append(state.as_array())
    return np.array(out).reshape(-1, 5)


def pose_loss(pred_poses, gt_poses, lam: float = 0.8, theta_weight: float = 1.0) -> float:
    """Discounted squared pose error ``sum_t lam^t |p_t - p_hat_t|^2``.

    The heading residual is wrapped to (-pi, pi] before squaring.
    """
    pred = np.asarray(pred_poses, dtype=float)
    gt = np.asarray(gt_poses, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"pose sequences differ in shape: {pred.shape} vs {gt.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    dx = pred[:, 0] - gt[:, 0]
    dy = pred[:, 1] - gt[:, 1]
    dth = wrap_angles(pred[:, 2] - gt[:, 2])
    weights = lam ** np.arange(len(pred), dtype=float)
    return float(np.sum(weights * (dx * dx + dy * dy + theta_weight * dth * dth)))


# --------------------------------------------------------------------------
# model files


def save_model(model: TrajectoryGenerator, filename) -> None:
    arrays = [("feat_mean", model.feat_mean), ("feat_std", model.feat_std)]
    for i, (W, b) in enumerate(model.weights):
        arrays += [(f"W{i}", W), (f"b{i}", b)]
    header = {
        "config": model.config.to_dict(),
        "activation": model.config.activation,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(filename, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(filename) -> TrajectoryGenerator:
    with open(filename, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MODEL_MAGIC:
        raise ConfigurationError(f"{filename}: not a trajectory generator model file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise ConfigurationError(f"{filename}: unsupported model version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(float)
        offset += 8 * n
    config = GeneratorConfig.from_dict(header["config"])
    n_layers = len(config.hidden) + 1
    weights = [(arrays[f"W{i}"], arrays[f"b{i}"]) for i in range(n_layers)]
    return TrajectoryGenerator(config, weights, arrays["feat_mean"], arrays["feat_std"])


__all__ = [
    "ConfigurationError",
    "GeneratorConfig",
    "TrajectoryGenerator",
    "TrajectoryPrediction",
    "features",
    "integrate_controls",
    "load_model",
    "pose_loss",
    "predict_chunk",
    "rollout_autoregressive",
    "save_model",
    "OBS_DIM",
]
