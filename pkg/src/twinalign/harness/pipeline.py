"""Pipeline stages: each reads and writes files so stages can be re-run independently."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from ..distill import (
    GeneratorConfig,
    collect_dataset,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    train,
)
from ..distill.dataset import target_speed_profile
from ..geometry import OUConfig, Path, PathExhaustedError, add_waypoint_noise, generate_ou_path, project_curvilinear, resample_arclength
from ..models import ControlInput, VehicleState, kinematic_step
from ..policy import assemble_state, expert_policy
from ..runtime import ModelPlanner, RunResult, init_world, run_alignment
from .config import ConfigError, ExperimentConfig
from .io import load_track, write_log, write_track
from .metrics import MetricsSummary, summarize
from .plots import emit_plots

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def _require(filename: str, what: str) -> str:
    if not os.path.isfile(filename):
        raise ConfigError(f"{what} not found: {filename}")
    return filename


def _ensure_dir(filename: str) -> None:
    d = os.path.dirname(filename)
    if d:
        os.makedirs(d, exist_ok=True)


def check_timesteps(cfg: ExperimentConfig, gen: GeneratorConfig | None = None) -> None:
    gen = gen or cfg.generator
    dts = {"plant": cfg.plant.dt, "alignment": cfg.alignment.dt, "generator": gen.dt}
    if len({round(v, 12) for v in dts.values()}) != 1:
        raise ConfigError(f"time steps disagree: {dts}")


def make_track(cfg: ExperimentConfig) -> Path:
    """Ornstein-Uhlenbeck track of ``run.track_length`` meters with a target-speed profile."""
    run = cfg.run
    ss = np.random.SeedSequence([run.seed, 7])
    path_seed, noise_seed, profile_seed = ss.generate_state(3)
    n = int(math.ceil(run.track_length / cfg.ou.step_len)) + 1
    raw = generate_ou_path(OUConfig(**{**cfg.ou.__dict__, "n_points": n, "seed": int(path_seed)}))
    if run.track_noise > 0:
        raw = add_waypoint_noise(raw, run.track_noise, int(noise_seed))
    path = resample_arclength(raw, cfg.generator.d_s)
    rng = np.random.default_rng(int(profile_seed))
    return path.with_target_speed(target_speed_profile(path, rng, run))


def start_state(track: Path, v: float = 0.0) -> VehicleState:
    p0, p1 = track.waypoints[0], track.waypoints[1]
    return VehicleState(float(p0[0]), float(p0[1]), math.atan2(p1[1] - p0[1], p1[0] - p0[0]), v, 0.0)


def gen_path(cfg: ExperimentConfig, out: str | None = None) -> str:
    out = out or cfg.track_file
    _ensure_dir(out)
    track = make_track(cfg)
    write_track(track, out)
    log.info("track of %.1f m (%d waypoints) written to %s", track.length, len(track), out)
    return out


def rollout_expert(cfg: ExperimentConfig, track_file: str | None = None, out: str | None = None) -> dict:
    """Drive the expert over a track with the nominal kinematic model; writes a state CSV."""
    track = load_track(_require(track_file or cfg.track_file, "track file"))
    out = out or cfg.out_path("expert_rollout.csv")
    _ensure_dir(out)
    g = cfg.generator
    policy = partial(expert_policy, g=cfg.expert)
    vt = None if track.v_target is not None else cfg.run.v_target
    veh, prev, hint = start_state(track), ControlInput(), None
    rows, offsets = [], []
    for k in range(int(round(cfg.run.max_time / g.dt))):
        try:
            s = assemble_state(veh, prev, track, vt, g.n_waypoints, g.d_s, hint=hint)
        except PathExhaustedError:
            break
        hint = s.par.sigma
        d = project_curvilinear(veh.pose, track, hint).d
        u = policy(s)
        rows.append((k * g.dt, *veh.as_array(), u.a, u.omega, hint, d))
        offsets.append(abs(d))
        veh = kinematic_step(veh, u, g.dt, g.wheelbase, forward_only=g.forward_only, gamma_max=g.gamma_max)
        prev = u
        if veh.v < 0.05 and hint > track.length - 5.0:
            break
    header = "t,x,y,theta,v,gamma,a,omega,sigma,d"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")
    stats = {"steps": len(rows), "mean_abs_d": float(np.mean(offsets)) if offsets else 0.0,
             "max_abs_d": float(np.max(offsets)) if offsets else 0.0, "output": out}
    log.info("expert rollout: %s", stats)
    return stats


def collect(cfg: ExperimentConfig, out: str | None = None) -> str:
    out = out or cfg.dataset_file
    _ensure_dir(out)
    policy = partial(expert_policy, g=cfg.expert)
    try:
        ds = collect_dataset(policy, cfg.collect_config(), cfg.training)
    except Exception as exc:  # noqa: BLE001
        raise StageError("collect", str(exc)) from exc
    save_dataset(ds, out)
    log.info("%d samples from %d paths written to %s", len(ds), len(ds.paths), out)
    return out


def train_stage(cfg: ExperimentConfig, dataset_file: str | None = None, out: str | None = None) -> str:
    ds = load_dataset(_require(dataset_file or cfg.dataset_file, "dataset file"))
    out = out or cfg.model_file
    _ensure_dir(out)
    try:
        model, report = train(ds, cfg.generator, cfg.training)
    except Exception as exc:  # noqa: BLE001
        raise StageError("train", str(exc)) from exc
    save_model(model, out)
    rep = {"initial_loss": report.initial_loss, "epoch_losses": report.epoch_losses,
           "epoch_control_losses": report.epoch_control_losses, "reduction": report.reduction}
    with open(os.path.splitext(out)[0] + "_training.json", "w", encoding="utf-8") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("model written to %s (loss reduction %.3f)", out, report.reduction)
    return out


@dataclass
class AlignmentArtifacts:
    log_file: str
    metrics_file: str
    plot_file: str | None
    summary: MetricsSummary
    result: RunResult


def run_alignment_stage(
    cfg: ExperimentConfig,
    track_file: str | None = None,
    model_file: str | None = None,
    log_file: str | None = None,
    plot: bool = True,
) -> AlignmentArtifacts:
    track = load_track(_require(track_file or cfg.track_file, "track file"))
    model = load_model(_require(model_file or cfg.model_file, "model file"))
    check_timesteps(cfg, model.config)
    log_file = log_file or cfg.out_path("log.csv")
    _ensure_dir(log_file)
    planner = ModelPlanner(model, track, v_target=cfg.run.v_target)
    try:
        world = init_world(planner, start_state(track), cfg.plant, model.config, cfg.alignment)
        result = run_alignment(world, cfg.alignment, cfg.run.max_time, cfg.run.stop_hold)
    except Exception as exc:  # noqa: BLE001
        raise StageError("run-alignment", f"{type(exc).__name__}: {exc}") from exc
    if not result.records:
        raise StageError("run-alignment", "no steps were executed")
    write_log(result.records, log_file)
    summary = summarize(result.records)
    base = os.path.splitext(log_file)[0]
    metrics_file = base + "_metrics.json"
    write_metrics(summary, metrics_file, extra={"termination": result.reason})
    plot_file = emit_plots(result.records, f"{base}.{cfg.run.plot_format}") if plot else None
    return AlignmentArtifacts(log_file, metrics_file, plot_file, summary, result)


def write_metrics(summary: MetricsSummary, filename: str, extra: dict | None = None) -> None:
    data = asdict(summary)
    data.update(extra or {})
    with open(filename, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def check_gates(summary: MetricsSummary, cfg: ExperimentConfig) -> list[tuple[str, float, float, bool]]:
    """(name, value, limit, passed) for every enabled gate."""
    g = cfg.gates
    checks = [
        ("mean_lat", summary.mean_lat, g.mean_lat),
        ("mean_long", summary.mean_long, g.mean_long),
        ("mean_vel", summary.mean_vel, g.mean_vel),
        ("max_lat", summary.max_lat, g.max_lat),
        ("max_resets", summary.counts.get("Reset", 0), g.max_resets),
    ]
    return [(name, float(v), float(lim), v <= lim) for name, v, lim in checks if lim is not None]
