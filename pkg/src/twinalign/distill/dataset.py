"""Trajectory dataset collection from a step-wise policy, plus the dataset file format.

Dataset file layout (little endian)::

    magic    4 bytes  b"TWDS"
    version  uint32   (currently 1)
    hlen     uint32   length of the JSON header
    header   UTF-8 JSON: n_samples, n_horizon, n_waypoints, path_sizes
    paths    per path: float64 (n, 3) rows of x, y, v_target
    records  n_samples records of float64:
             path_id, sigma0, s0 (7 + 1 + 2 * n_waypoints),
             a_seq (N_H), omega_seq (N_H), gt_poses (N_H * 3)
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..geometry import (
    OUConfig,
    Path,
    PathExhaustedError,
    add_waypoint_noise,
    generate_ou_path,
    pose_from_curvilinear,
    project_curvilinear,
    resample_arclength,
)
from ..models import ControlInput, VehicleState, clamp_action, kinematic_step, wrap_angle
from ..policy import assemble_state, state_dim
from .generator import GeneratorConfig

DATASET_MAGIC = b"TWDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class CollectConfig:
    """Simulation environment used to roll out the policy."""

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    ou: OUConfig = field(default_factory=lambda: OUConfig(n_points=400))
    waypoint_noise: float = 0.1
    v_target_range: tuple[float, float] = (3.0, 11.0)
    v_target_segment: tuple[float, float] = (60.0, 200.0)  # length of constant-speed stretches [m]
    init_d: float = 0.5
    init_dpsi: float = 0.2
    init_gamma: float = 0.1
    p_standing_start: float = 0.3
    max_offtrack: float = 3.0
    max_steps: int = 3000
    workers: int = 1


@dataclass(frozen=True)
class TrajectorySample:
    s0: np.ndarray
    a_seq: np.ndarray
    omega_seq: np.ndarray
    gt_poses: np.ndarray
    path_id: int = 0
    sigma0: float = 0.0

    @property
    def vehicle(self) -> VehicleState:
        return VehicleState.from_array(self.s0[:5])


@dataclass
class Dataset:
    paths: list
    path_ids: np.ndarray  # (n,)
    sigma0: np.ndarray  # (n,)
    states: np.ndarray  # (n, state_dim)
    controls: np.ndarray  # (n, N_H, 2)
    poses: np.ndarray  # (n, N_H, 3)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i) -> TrajectorySample:
        return TrajectorySample(
            self.states[i],
            self.controls[i, :, 0],
            self.controls[i, :, 1],
            self.poses[i],
            int(self.path_ids[i]),
            float(self.sigma0[i]),
        )

    @property
    def n_horizon(self) -> int:
        return self.controls.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.paths, self.path_ids[idx], self.sigma0[idx], self.states[idx], self.controls[idx], self.poses[idx]
        )


def target_speed_profile(path: Path, rng: np.random.Generator, cfg) -> np.ndarray:
    """Piecewise-constant target speed per waypoint.

    ``cfg`` supplies ``v_target_range`` (speed levels) and ``v_target_segment``
    (stretch lengths in meters).
    """
    lo, hi = cfg.v_target_range
    seg_lo, seg_hi = cfg.v_target_segment
    vt = np.empty(len(path))
    s = path.arclength
    start = 0.0
    while start <= s[-1]:
        end = start + rng.uniform(seg_lo, seg_hi)
        vt[(s >= start) & (s < end)] = rng.uniform(lo, hi)
        start = end
    return vt


def episode_path(seed_seq: np.random.SeedSequence, cfg: CollectConfig) -> Path:
    rng = np.random.default_rng(seed_seq.spawn(1)[0])
    ou = OUConfig(**{**cfg.ou.__dict__, "seed": int(rng.integers(2**31))})
    raw = generate_ou_path(ou)
    noisy = add_waypoint_noise(raw, cfg.waypoint_noise, int(rng.integers(2**31)))
    path = resample_arclength(noisy, cfg.generator.d_s)
    return path.with_target_speed(target_speed_profile(path, rng, cfg))


def initial_state(path: Path, rng: np.random.Generator, cfg: CollectConfig) -> VehicleState:
    d = rng.uniform(-cfg.init_d, cfg.init_d)
    x, y = pose_from_curvilinear(path, 0.0, d)
    heading = math.atan2(*(path.waypoints[1] - path.waypoints[0])[::-1])
    theta = wrap_angle(heading + rng.uniform(-cfg.init_dpsi, cfg.init_dpsi))
    gamma = rng.uniform(-cfg.init_gamma, cfg.init_gamma)
    v = 0.0 if rng.random() < cfg.p_standing_start else rng.uniform(0.0, path.target_speed_at(0.0))
    return VehicleState(float(x), float(y), theta, v, gamma)


def run_episode(policy, path: Path, rng: np.random.Generator, cfg: CollectConfig, noise_std: float):
    """Roll ``policy`` with control noise; returns (states, flat agent states, sigmas, controls).

    Returns ``None`` when the vehicle leaves the path.
    """
    g = cfg.generator
    bounds = g.bounds
    veh = initial_state(path, rng, cfg)
    prev = ControlInput()
    hint = 0.0
    vehicles, flats, sigmas, controls = [veh.as_array()], [], [], []
    stopped = 0
    for _ in range(cfg.max_steps):
        try:
            s = assemble_state(veh, prev, path, None, g.n_waypoints, g.d_s, hint=hint)
        except PathExhaustedError:
            break
        hint = s.par.sigma
        if abs(project_curvilinear(veh.pose, path, hint).d) > cfg.max_offtrack:
            return None
        u = policy(s)
        if noise_std > 0:
            u = ControlInput(*(np.array([u.a, u.omega]) + rng.normal(0.0, noise_std, 2)))
        u = clamp_action(u, bounds)
        veh = kinematic_step(veh, u, g.dt, g.wheelbase, forward_only=g.forward_only, gamma_max=g.gamma_max)
        flats.append(s.flatten())
        sigmas.append(s.par.sigma)
        controls.append((u.a, u.omega))
        vehicles.append(veh.as_array())
        prev = u
        if veh.v < 0.05 and hint > path.length - 5.0:
            stopped += 1
            if stopped > g.n_horizon:
                break
        else:
            stopped = 0
    return np.array(vehicles), np.array(flats), np.array(sigmas), np.array(controls)


def _episode_samples(args):
    policy, cfg, noise_std, seed, episode = args
    ss = np.random.SeedSequence([seed, episode])
    path = episode_path(ss, cfg)
    rng = np.random.default_rng(ss.spawn(2)[1])
    out = run_episode(policy, path, rng, cfg, noise_std)
    if out is None:
        return path, None
    vehicles, flats, sigmas, controls = out
    n_h = cfg.generator.n_horizon
    n = len(controls) - n_h + 1
    if n <= 0:
        return path, None
    idx = np.arange(n)[:, None] + np.arange(n_h)[None, :]
    return path, (sigmas[:n], flats[:n], controls[idx], vehicles[idx + 1][..., :3])


def collect_dataset(policy, env_cfg: CollectConfig, train_cfg) -> Dataset:
    """Roll ``policy`` on fresh random paths and cut the rollouts into samples.

    Every step of every episode is an anchor; its sample holds the agent
    state and the next ``n_horizon`` executed controls (noise injected before
    clamping) with the poses they produce.  Episodes whose vehicle strays
    more than ``max_offtrack`` from the path are discarded.
    """
    n_target = train_cfg.n_samples
    noise = train_cfg.control_noise
    paths, chunks = [], []
    total, episode = 0, 0
    batch = max(env_cfg.workers, 1)
    pool = ProcessPoolExecutor(env_cfg.workers) if env_cfg.workers > 1 else None
    try:
        while total < n_target:
            jobs = [(policy, env_cfg, noise, train_cfg.seed, episode + j) for j in range(batch)]
            results = pool.map(_episode_samples, jobs) if pool else map(_episode_samples, jobs)
            for path, samples in results:
                if samples is None or total >= n_target:
                    continue
                paths.append(path)
                chunks.append((len(paths) - 1, samples))
                total += len(samples[0])
            episode += batch
            if episode > 100 * (n_target // 100 + 10):
                raise RuntimeError("dataset collection keeps failing; check the policy")
    finally:
        if pool:
            pool.shutdown()

    path_ids = np.concatenate([np.full(len(s[0]), pid) for pid, s in chunks])
    sigma0 = np.concatenate([s[0] for _, s in chunks])
    states = np.concatenate([s[1] for _, s in chunks])
    controls = np.concatenate([s[2] for _, s in chunks])
    poses = np.concatenate([s[3] for _, s in chunks])
    ds = Dataset(paths, path_ids, sigma0, states, controls, poses)
    return ds.subset(np.arange(n_target))


# --------------------------------------------------------------------------
# dataset files


def save_dataset(ds: Dataset, filename) -> None:
    n, n_h = len(ds), ds.n_horizon
    n_w = (ds.states.shape[1] - 8) // 2
    header = {
        "n_samples": n,
        "n_horizon": n_h,
        "n_waypoints": n_w,
        "path_sizes": [len(p) for p in ds.paths],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = np.concatenate(
        [
            ds.path_ids[:, None].astype(float),
            ds.sigma0[:, None],
            ds.states,
            ds.controls[:, :, 0],
            ds.controls[:, :, 1],
            ds.poses.reshape(n, -1),
        ],
        axis=1,
    )
    with open(filename, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(hbytes)))
        fh.write(hbytes)
        for p in ds.paths:
            vt = p.v_target if p.v_target is not None else np.full(len(p), np.nan)
            rows = np.column_stack([p.waypoints, vt])
            fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(records, dtype="<f8").tobytes())


def load_dataset(filename) -> Dataset:
    with open(filename, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError(f"{filename}: not a trajectory dataset file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{filename}: unsupported dataset version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    paths = []
    for size in header["path_sizes"]:
        rows = np.frombuffer(blob, "<f8", count=3 * size, offset=offset).reshape(size, 3)
        offset += 24 * size
        vt = None if np.all(np.isnan(rows[:, 2])) else rows[:, 2]
        paths.append(Path(rows[:, :2].copy(), None if vt is None else vt.copy()))
    n, n_h, n_w = header["n_samples"], header["n_horizon"], header["n_waypoints"]
    width = 2 + state_dim(n_w) + 5 * n_h
    rec = np.frombuffer(blob, "<f8", count=n * width, offset=offset).reshape(n, width).astype(float)
    sd = state_dim(n_w)
    states = rec[:, 2 : 2 + sd]
    a = rec[:, 2 + sd : 2 + sd + n_h]
    w = rec[:, 2 + sd + n_h : 2 + sd + 2 * n_h]
    poses = rec[:, 2 + sd + 2 * n_h :].reshape(n, n_h, 3)
    return Dataset(paths, rec[:, 0].astype(np.int64), rec[:, 1].copy(), states, np.stack([a, w], axis=-1), poses)
