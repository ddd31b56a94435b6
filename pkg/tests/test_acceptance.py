"""Acceptance criteria, one PASS/FAIL line each (collected in the terminal summary).

The distillation fixture collects and trains at full size, so this module
takes several minutes on a desktop CPU.
"""

import dataclasses
import math
import time
from functools import partial

import numpy as np
import pytest

from twinalign.distill import (
    GeneratorConfig,
    TrajectoryGenerator,
    TrainConfig,
    collect_dataset,
    evaluate_open_loop,
    pose_loss,
    train,
)
from twinalign.distill.training import loss_and_grad
from twinalign.geometry import CurvilinearState, OUConfig, Path, add_waypoint_noise, discrete_curvature, generate_ou_path
from twinalign.harness.cli import main
from twinalign.harness.config import ExperimentConfig
from twinalign.harness.metrics import summarize
from twinalign.harness.pipeline import make_track, start_state
from twinalign.models import ControlInput, PlantConfig, VehicleState, kinematic_step
from twinalign.policy import RewardWeights, compute_reward, expert_policy, huber
from twinalign.runtime import (
    AlignmentConfig,
    AlignmentEvent,
    ModelPlanner,
    _seed_twin,
    init_world,
    longitudinal_command,
    run_alignment,
)

MISMATCH = PlantConfig(tau_a=0.2, tau_omega=0.1, command_delay=1, wheelbase_error=1.05)
ACFG = AlignmentConfig()


# --------------------------------------------------------------------------
# independent oracles (plain python, no package helpers)


def _wrap(a):
    return math.atan2(math.sin(a), math.cos(a))


def _huber(x, delta=1.0, alpha=0.25):
    return alpha * (0.5 * x * x / delta if abs(x) <= delta else abs(x) - 0.5 * delta)


def _step(s, a, w, dt, L):
    x, y, th, v, g = s
    return (
        x + dt * v * math.cos(th),
        y + dt * v * math.sin(th),
        _wrap(th + dt * v / L * math.tan(g)),
        max(v + dt * a, 0.0),
        g + dt * w,
    )


def _reward(d, v, vt, g, L, u, up, dt, wt):
    kappa = math.tan(g) / L
    vmax = vt if kappa == 0.0 else min(vt, math.sqrt(2.5 / abs(kappa)))
    terms = [
        wt.R_dev * _huber(d),
        wt.R_vel * _huber(max(0.0, v - vmax)),
        wt.R_progress * min(v, vmax) * dt,
        wt.R_acc * _huber(u[0]),
        wt.R_omega * _huber(u[1]),
        wt.R_jerk * _huber(u[0] - up[0]),
        wt.R_delta_omega * _huber(u[1] - up[1]),
        wt.R_hold * (1.0 if vmax <= 0 and v > 0 else 0.0),
    ]
    return terms, math.fsum(terms)


def _pose_loss(p, q, lam):
    total = 0.0
    for t in range(len(p)):
        dx, dy, dth = p[t][0] - q[t][0], p[t][1] - q[t][1], _wrap(p[t][2] - q[t][2])
        total += lam**t * (dx * dx + dy * dy + dth * dth)
    return total


def _longitudinal(arcs, speeds, a_hist, sigma_R, v_R):
    # nearest vertex, ties to the later one; the current state has no control yet
    best = min(abs(s - sigma_R) for s in arcs)
    idx = max(i for i, s in enumerate(arcs) if abs(s - sigma_R) <= best + 1e-12)
    a_ff = a_hist[idx] if idx < len(a_hist) else 0.0
    a = a_ff + 1.5 * (arcs[-2] - sigma_R) + 1.0 * (speeds[-2] - v_R)
    return min(max(a, -2.0), 2.0)


def _close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def test_equation_exactness(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    fails = []

    for _ in range(1000):
        s = (*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi), rng.uniform(0, 12), rng.uniform(-1.2, 1.2))
        a, w = rng.uniform(-3, 3), rng.uniform(-1, 1)
        dt, L = rng.uniform(0.01, 0.2), rng.uniform(1.0, 4.0)
        got = kinematic_step(VehicleState(*s), ControlInput(a, w), dt, L).as_array()
        ref = _step(s, a, w, dt, L)
        if not all(_close(float(g), r) for g, r in zip(got, ref)):
            fails.append(("kinematic_step", s))

    for x in rng.uniform(-5, 5, 1000):
        if not _close(huber(float(x)), _huber(float(x))):
            fails.append(("huber", x))

    wt = RewardWeights(R_dev=-1.3, R_vel=-0.7, R_progress=0.9, R_acc=-0.2, R_omega=-0.3, R_jerk=-0.4,
                       R_delta_omega=-0.5, R_hold=-2.0)
    for k in range(1000):
        d, v = rng.uniform(-2, 2), rng.uniform(0, 12)
        vt = 0.0 if k % 10 == 0 else rng.uniform(0, 12)
        g = 0.0 if k % 7 == 0 else rng.uniform(-0.5, 0.5)
        u, up = tuple(rng.uniform(-2.5, 2.5, 2)), tuple(rng.uniform(-2.5, 2.5, 2))
        dt, L = rng.uniform(0.01, 0.2), rng.uniform(1.0, 4.0)
        r = compute_reward(d, v, vt, g, L, ControlInput(*u), ControlInput(*up), dt, wt)
        terms, total = _reward(d, v, vt, g, L, u, up, dt, wt)
        if not (all(_close(a, b) for a, b in zip(r.terms(), terms)) and _close(r.total, total)):
            fails.append(("compute_reward", k))

    base = _seed_twin(VehicleState(), ControlInput(), 0.0, ACFG)
    for k in range(1000):
        n = int(rng.integers(3, 9))
        arcs = np.cumsum(rng.uniform(0.0, 1.5, n)) + rng.uniform(0, 100)
        hist = np.zeros((n, 5))
        hist[:, 3] = rng.uniform(0, 11, n)
        ctrl = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-0.5, 0.5, n)])
        ctrl[-1] = np.nan
        twin = dataclasses.replace(base, hist_arcs=arcs, hist_states=hist, hist_controls=ctrl)
        sigma_R = float(arcs[int(rng.integers(n))]) if k % 5 == 0 else rng.uniform(arcs[0] - 1, arcs[-1] + 1)
        v_R = rng.uniform(0, 11)
        got = longitudinal_command(twin, CurvilinearState(sigma_R, 0.0, 0.0, 0, 0.0, 0.0, False), v_R, ACFG)
        ref = _longitudinal(list(arcs), list(hist[:, 3]), list(ctrl[:-1, 0]), sigma_R, v_R)
        if not _close(got, ref):
            fails.append(("longitudinal_command", k))

    for k in range(1000):
        n = int(rng.integers(1, 41))
        p = np.column_stack([rng.uniform(-5, 5, (n, 2)), rng.uniform(-10, 10, n)])
        q = np.column_stack([rng.uniform(-5, 5, (n, 2)), rng.uniform(-10, 10, n)])
        lam = float(rng.uniform(0, 1))
        if not _close(pose_loss(p, q, lam), _pose_loss(p.tolist(), q.tolist(), lam)):
            fails.append(("pose_loss", k))

    elapsed = time.perf_counter() - t0
    verdict(
        "1 equation exactness",
        not fails and elapsed < 5.0,
        f"5 x 1000 inputs, {len(fails)} mismatches beyond 1e-12 {fails[:3]}, {elapsed:.2f} s (limit 5 s)",
    )


# --------------------------------------------------------------------------


def test_rollout_gradient_check(verdict):
    t0 = time.perf_counter()
    tiny = GeneratorConfig(n_horizon=4, chunk=2, hidden=(8,))
    ds = collect_dataset(expert_policy, dataclasses.replace(_collect_cfg(), generator=tiny),
                         TrainConfig(n_samples=200, seed=3))
    worst = 0.0
    for inst in range(10):
        rng = np.random.default_rng(100 + inst)
        model = TrajectoryGenerator.init(tiny, seed=inst)
        sub = ds.subset(rng.choice(len(ds), 4, replace=False))
        _, grads = loss_and_grad(model, sub)
        for _ in range(10):
            layer, which = int(rng.integers(len(model.weights))), int(rng.integers(2))
            arr = model.weights[layer][which]
            idx = tuple(int(rng.integers(m)) for m in arr.shape)
            orig, h = arr[idx], 1e-5
            arr[idx] = orig + h
            lp, _ = loss_and_grad(model, sub)
            arr[idx] = orig - h
            lm, _ = loss_and_grad(model, sub)
            arr[idx] = orig
            fd, an = (lp - lm) / (2 * h), grads[layer][which][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    elapsed = time.perf_counter() - t0
    verdict(
        "2 rollout gradient check",
        worst < 1e-4 and elapsed < 60.0,
        f"10 instances x 10 weights, max rel error {worst:.2e} (limit 1e-4), {elapsed:.1f} s (limit 60 s)",
    )


def _collect_cfg():
    return ExperimentConfig().collect_config()


# --------------------------------------------------------------------------
# distillation at full size, shared by the closed-loop criteria


@pytest.fixture(scope="module")
def distilled():
    cfg = ExperimentConfig()
    policy = partial(expert_policy, g=cfg.expert)
    t0 = time.perf_counter()
    ds = collect_dataset(policy, cfg.collect_config(), cfg.training)
    model, report = train(ds, cfg.generator, cfg.training)
    held = collect_dataset(policy, cfg.collect_config(), dataclasses.replace(cfg.training, n_samples=1000, seed=12345))
    err = evaluate_open_loop(model, held)
    return dict(cfg=cfg, n=len(ds), model=model, report=report, err=err, seconds=time.perf_counter() - t0)


def test_distillation_gate(distilled, verdict):
    rep, err = distilled["report"], distilled["err"]
    ok = rep.reduction <= 0.10 and err[9] <= 0.15 and err[39] <= 1.0
    verdict(
        "3 distillation gate",
        ok and distilled["n"] == 50_000 and len(rep.epoch_losses) == 20,
        f"{distilled['n']} samples, {len(rep.epoch_losses)} epochs, final/first epoch loss {rep.reduction:.4f} "
        f"(limit 0.10), held-out error step 9 {err[9]:.3f} m (limit 0.15), step 39 {err[39]:.3f} m (limit 1.0), "
        f"{distilled['seconds']:.0f} s",
    )


def _closed_loop(distilled, plant, cfg=None):
    cfg, model = cfg or distilled["cfg"], distilled["model"]
    track = make_track(cfg)
    t0 = time.perf_counter()
    world = init_world(ModelPlanner(model, track), start_state(track), plant, model.config, cfg.alignment)
    res = run_alignment(world, cfg.alignment, cfg.run.max_time, cfg.run.stop_hold)
    return track, res, summarize(res.records), time.perf_counter() - t0


def test_matched_closed_loop(distilled, verdict):
    """The default track, then the same geometry at a constant 11 m/s (top of the speed envelope)."""
    base = distilled["cfg"]
    fast = dataclasses.replace(base, run=dataclasses.replace(base.run, v_target_range=(11.0, 11.0)))
    ok, parts = True, []
    for cfg in (base, fast):
        track, res, m, elapsed = _closed_loop(distilled, PlantConfig(), cfg)
        ok &= (m.mean_lat <= 0.05 and m.mean_long <= 0.10 and m.mean_vel <= 0.15 and res.reason == "stopped"
               and track.length >= 1899.0 and elapsed < 30.0)
        parts.append(
            f"[{track.length:.0f} m, target speeds up to {float(np.max(track.v_target)):.1f} m/s, end '{res.reason}', "
            f"mean |lat| {m.mean_lat:.4f} m, mean |long| {m.mean_long:.4f} m, mean |vel| {m.mean_vel:.4f} m/s, "
            f"{elapsed:.1f} s]"
        )
    verdict("4 matched closed loop", ok, " ".join(parts) + " (limits 0.05 m, 0.10 m, 0.15 m/s, 30 s per run)")


def test_mismatched_closed_loop(distilled, verdict):
    track, res, m, elapsed = _closed_loop(distilled, MISMATCH)
    recs = res.records
    end = recs[-1].t
    freeze_t = [r.t for r in recs if r.event is AlignmentEvent.FREEZE]
    ff_t = [r.t for r in recs if r.event is AlignmentEvent.FAST_FORWARD]
    launch = any(t < 5.0 for t in freeze_t)
    stop = any(t > end - 10.0 for t in ff_t)
    resets = m.counts.get("Reset", 0)
    ok = m.max_lat <= 0.5 and m.mean_lat <= 0.15 and resets == 0 and launch and stop
    verdict(
        "5 mismatched closed loop",
        ok and res.reason == "stopped" and elapsed < 30.0,
        f"end '{res.reason}' after {end:.1f} s, max |lat| {m.max_lat:.3f} m (limit 0.5), mean |lat| "
        f"{m.mean_lat:.3f} m (limit 0.15), resets {resets}, first Freeze at {min(freeze_t, default=math.nan):.1f} s "
        f"(launch: first 5 s), last FastForward at {max(ff_t, default=math.nan):.1f} s (stop phase: final 10 s), "
        f"{elapsed:.1f} s (limit 30 s)",
    )


# --------------------------------------------------------------------------


def test_alignment_invariants(distilled, verdict):
    """Twenty 300 m runs, even seeds on the matched plant and odd seeds on the mismatched one.

    The band (a) is checked from 3 s until the twin's final standstill: from
    then on the band has zero width and no event can move the twin.  The lag
    (d) is checked in steady state, i.e. with the twin cruising above 1 m/s
    and its acceleration within 0.5 m/s^2.
    """
    cfg, model = distilled["cfg"], distilled["model"]
    dt = cfg.alignment.dt
    band_bad = lag_bad = freeze_bad = ff_bad = 0
    band_steps = lag_steps = n_freeze = n_ff = 0
    lags, with_reset = [], []
    for seed in range(20):
        run = dataclasses.replace(cfg.run, seed=seed, track_length=300.0)
        track = make_track(dataclasses.replace(cfg, run=run))
        plant = MISMATCH if seed % 2 else PlantConfig()
        prev = {}

        def check(world, rec):
            nonlocal freeze_bad, ff_bad, n_freeze, n_ff
            before, after = prev["twin"], world.twin
            if rec.event is AlignmentEvent.FREEZE:
                n_freeze += 1
                same = (before.state == after.state and before.t == after.t and before.consumed == after.consumed
                        and all(np.array_equal(getattr(before, f), getattr(after, f), equal_nan=True)
                                for f in ("hist_states", "hist_controls", "hist_arcs", "pred_controls", "pred_states")))
                freeze_bad += not same
            elif rec.event is AlignmentEvent.FAST_FORWARD:
                n_ff += 1
                s = before.state
                for a, w in before.pred_controls[:2]:
                    s = kinematic_step(s, ControlInput(float(a), float(w)), dt, model.config.wheelbase,
                                       gamma_max=model.config.gamma_max)
                ok = (after.consumed - before.consumed == 2 and after.t - before.t == 2 and after.state == s
                      and np.array_equal(after.hist_controls[-3:-1], before.pred_controls[:2]))
                ff_bad += not ok
            prev["twin"] = world.twin

        world = init_world(ModelPlanner(model, track), start_state(track), plant, model.config, cfg.alignment)
        prev["twin"] = world.twin
        res = run_alignment(world, cfg.alignment, 120.0, cfg.run.stop_hold, on_step=check)
        recs = res.records
        if any(r.event is AlignmentEvent.RESET for r in recs):
            with_reset.append(seed)
            continue
        final = recs[-1].sigma_V
        for r in recs:
            if r.t < 3.0 or r.sigma_V >= final - 1e-9:
                continue
            band_steps += 1
            eps = dt * max(r.v_V, r.v_R)
            band_bad += not (r.sigma_lower - eps <= r.sigma_R <= r.sigma_V + eps)
            if r.v_V > 1.0 and abs(r.a_virtual) <= 0.5:
                lag_steps += 1
                lag = (r.sigma_V - r.sigma_R) / r.v_V
                lags.append(lag)
                lag_bad += not (0.0 <= lag <= 2 * dt)
    lo, hi = (min(lags), max(lags)) if lags else (math.nan, math.nan)
    clean = 20 - len(with_reset)
    verdict(
        "6 alignment invariants",
        band_bad == lag_bad == freeze_bad == ff_bad == 0 and band_steps > 0 and lag_steps > 0 and n_freeze and n_ff,
        f"(a) band violations {band_bad}/{band_steps} steps, (b) Freeze steps changing the twin {freeze_bad}/{n_freeze}, "
        f"(c) FastForward steps not consuming two controls {ff_bad}/{n_ff}, (d) steady-state lag outside "
        f"[0, {2 * dt:.1f}] s {lag_bad}/{lag_steps} (range {lo:.4f}..{hi:.4f} s); (a) and (d) over the {clean} "
        f"Reset-free runs, seeds with a Reset: {with_reset}",
    )


# --------------------------------------------------------------------------


def test_path_generator(verdict):
    worst = {}
    for name, ou in (("default", OUConfig()), ("volatile", OUConfig(sigma_ou=0.05))):
        ratios = []
        for seed in range(100):
            p = generate_ou_path(dataclasses.replace(ou, seed=seed))
            ratios.append(np.max(np.abs(discrete_curvature(p.waypoints))) / ou.kappa_max)
        worst[name] = max(ratios)
    n = 50_000  # 10^5 coordinates
    clean = Path(np.column_stack([np.arange(n, dtype=float), np.zeros(n)]))
    noise = (add_waypoint_noise(clean, 0.1, 11).waypoints - clean.waypoints).ravel()
    std = float(np.std(noise))
    ok = all(w <= 1.02 for w in worst.values()) and abs(std - 0.1) <= 0.003
    verdict(
        "7 path generator",
        ok,
        f"max curvature / kappa_max over 100 paths {worst['default']:.4f} (default), {worst['volatile']:.4f} "
        f"(sigma_ou 0.05) (limit 1.02); noise std over {noise.size} samples {std:.5f} (0.1 +/- 3%)",
    )


def test_determinism(tmp_path, verdict):
    cfg = tmp_path / "small.yaml"
    cfg.write_text(
        "run:\n  track_length: 200\n  max_time: 60\n  seed: 5\n"
        "generator:\n  hidden: [32, 32]\n  n_horizon: 20\n"
        "training:\n  n_samples: 400\n  epochs: 2\n  batch_size: 128\n"
    )
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        for cmd in (["gen-path"], ["collect"], ["train"], ["run-alignment", "--no-plot"]):
            assert main([*cmd, "-c", str(cfg), "-o", str(out)]) == 0, cmd
        outs.append(out)
    names = ("track.csv", "dataset.bin", "model.bin", "log.csv")
    same = {n: (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names}
    verdict(
        "8 determinism",
        all(same.values()),
        "byte-identical across two runs: " + ", ".join(f"{n} {'yes' if s else 'NO'}" for n, s in same.items()),
    )
