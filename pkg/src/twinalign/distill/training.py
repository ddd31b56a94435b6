"""Differentiable autoregressive rollout and generator training (torch).

The batched rollout mirrors :func:`rollout_autoregressive`: controls from each
chunk are integrated through the kinematic bicycle update, then the agent
state is rebuilt by projecting the integrated pose onto the sample's
reference path.  Every operation is differentiable, so the pose loss
back-propagates through the integration into the network weights.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import Dataset
from .generator import GeneratorConfig, TrajectoryGenerator, features

log = logging.getLogger(__name__)

BACK_VERTICES = 5
WINDOW = 20.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.9)
    weight_decay: float = 1e-4
    lam: float = 0.8
    theta_weight: float = 1.0
    control_weight: float = 0.1  # behaviour-cloning term on the recorded controls; 0 gives the pure pose loss
    epochs: int = 20
    batch_size: int = 1024
    n_samples: int = 50_000
    control_noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.n_samples < 1:
            raise ValueError("epochs, batch_size and n_samples must be >= 1")
        if self.control_noise < 0:
            raise ValueError("control_noise must be >= 0")
        if self.control_weight < 0:
            raise ValueError("control_weight must be >= 0")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass
class TrainingReport:
    """Per-epoch mean pose loss; the control term is tracked separately."""

    initial_loss: float
    epoch_losses: list = field(default_factory=list)
    epoch_control_losses: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    @property
    def reduction(self) -> float:
        """Final epoch mean loss relative to the first epoch mean loss."""
        return self.epoch_losses[-1] / self.epoch_losses[0]


class GeneratorNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig, feat_mean, feat_std):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.input_dim, *cfg.hidden, cfg.output_dim]
        layers = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(fi, fo))
            if i < len(dims) - 2:
                layers.append(nn.SiLU() if cfg.activation == "silu" else nn.Tanh())
        self.mlp = nn.Sequential(*layers)
        self.register_buffer("feat_mean", torch.as_tensor(np.asarray(feat_mean)))
        self.register_buffer("feat_std", torch.as_tensor(np.asarray(feat_std)))
        b = cfg.bounds
        self.register_buffer("u_mid", torch.tensor([0.5 * (b.a_max + b.a_min), 0.5 * (b.omega_max + b.omega_min)]))
        self.register_buffer("u_half", torch.tensor([0.5 * (b.a_max - b.a_min), 0.5 * (b.omega_max - b.omega_min)]))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """Bounded controls (B, chunk, 2)."""
        z = torch.tanh(self.mlp((feats - self.feat_mean) / self.feat_std))
        k = self.cfg.chunk
        z = torch.stack([z[:, :k], z[:, k:]], dim=-1)
        return self.u_mid + self.u_half * z

    @classmethod
    def from_generator(cls, model: TrajectoryGenerator, dtype=torch.float64) -> "GeneratorNet":
        net = cls(model.config, model.feat_mean, model.feat_std).to(dtype)
        linears = [m for m in net.mlp if isinstance(m, nn.Linear)]
        with torch.no_grad():
            for lin, (W, b) in zip(linears, model.weights):
                lin.weight.copy_(torch.as_tensor(W))
                lin.bias.copy_(torch.as_tensor(b))
        return net

    def to_generator(self) -> TrajectoryGenerator:
        linears = [m for m in self.mlp if isinstance(m, nn.Linear)]
        weights = [
            (lin.weight.detach().double().numpy().copy(), lin.bias.detach().double().numpy().copy())
            for lin in linears
        ]
        return TrajectoryGenerator(
            self.cfg,
            weights,
            self.feat_mean.detach().double().numpy().copy(),
            self.feat_std.detach().double().numpy().copy(),
        )


# --------------------------------------------------------------------------
# per-sample local reference tables


@dataclass
class LocalBatch:
    """Tensors for a batch of samples, all expressed in each sample's start frame."""

    feats0: torch.Tensor  # (B, F)
    v0: torch.Tensor  # (B,)
    gamma0: torch.Tensor  # (B,)
    pts: torch.Tensor  # (B, P, 2) reference vertices
    arcs: torch.Tensor  # (B, P) arc length relative to the start projection
    vt: torch.Tensor | None  # (B, P) target speed per vertex
    gt: torch.Tensor  # (B, N_H, 3)
    u: torch.Tensor  # (B, N_H, 2) recorded controls

    def index(self, idx) -> "LocalBatch":
        return LocalBatch(
            self.feats0[idx], self.v0[idx], self.gamma0[idx], self.pts[idx], self.arcs[idx],
            None if self.vt is None else self.vt[idx], self.gt[idx], self.u[idx],
        )


def local_tables(ds: Dataset, cfg: GeneratorConfig, dtype=torch.float32) -> LocalBatch:
    n_ahead = int(math.ceil(cfg.n_waypoints + cfg.n_horizon * cfg.dt * 15.0 / cfg.d_s)) + 2
    n_pts = BACK_VERTICES + n_ahead
    N = len(ds)
    pts = np.empty((N, n_pts, 2))
    arcs = np.empty((N, n_pts))
    vt = np.empty((N, n_pts))
    x0, y0, th0 = ds.states[:, 0], ds.states[:, 1], ds.states[:, 2]
    c, s = np.cos(th0), np.sin(th0)
    for pid in np.unique(ds.path_ids):
        rows = np.flatnonzero(ds.path_ids == pid)
        path = ds.paths[pid]
        i0 = np.searchsorted(path.arclength, ds.sigma0[rows], side="right") - 1
        idx = np.clip(i0[:, None] + np.arange(-BACK_VERTICES, n_ahead)[None, :], 0, len(path) - 1)
        pts[rows] = path.waypoints[idx]
        arcs[rows] = path.arclength[idx] - ds.sigma0[rows, None]
        vt[rows] = path.v_target[idx] if path.v_target is not None else ds.states[rows, 7:8]
    dx, dy = pts[..., 0] - x0[:, None], pts[..., 1] - y0[:, None]
    local = np.stack([c[:, None] * dx + s[:, None] * dy, -s[:, None] * dx + c[:, None] * dy], axis=-1)

    g = ds.poses
    gdx, gdy = g[..., 0] - x0[:, None], g[..., 1] - y0[:, None]
    gt = np.stack(
        [
            c[:, None] * gdx + s[:, None] * gdy,
            -s[:, None] * gdx + c[:, None] * gdy,
            np.angle(np.exp(1j * (g[..., 2] - th0[:, None]))),
        ],
        axis=-1,
    )
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)  # noqa: E731
    return LocalBatch(
        t(features(ds.states)), t(ds.states[:, 3]), t(ds.states[:, 4]), t(local), t(arcs), t(vt), t(gt),
        t(ds.controls),
    )


def _project(px, py, pts, arcs, hint):
    """Batched windowed projection; returns the arc position of the foot point."""
    p0 = pts[:, :-1]
    seg = pts[:, 1:] - p0
    l2 = (seg * seg).sum(-1)
    safe = torch.where(l2 > 1e-18, l2, torch.ones_like(l2))
    ox = px[:, None] - p0[..., 0]
    oy = py[:, None] - p0[..., 1]
    t = ((ox * seg[..., 0] + oy * seg[..., 1]) / safe).clamp(0.0, 1.0)
    t = torch.where(l2 > 1e-18, t, torch.zeros_like(t))
    fx = p0[..., 0] + t * seg[..., 0]
    fy = p0[..., 1] + t * seg[..., 1]
    dist2 = (px[:, None] - fx) ** 2 + (py[:, None] - fy) ** 2
    a0, a1 = arcs[:, :-1], arcs[:, 1:]
    inside = (a1 >= hint[:, None] - WINDOW) & (a0 <= hint[:, None] + WINDOW)
    dist2 = torch.where(inside, dist2, torch.full_like(dist2, float("inf")))
    k = dist2.argmin(dim=1, keepdim=True)
    sig = a0.gather(1, k) + t.gather(1, k) * (a1.gather(1, k) - a0.gather(1, k))
    return sig[:, 0]


def _interp(q, arcs, vals):
    """np.interp over each row: ``vals`` (B, P, C) sampled at queries ``q`` (B, Q)."""
    P = arcs.shape[1]
    idx = (torch.searchsorted(arcs.contiguous(), q.contiguous(), right=True) - 1).clamp(0, P - 2)
    a0 = arcs.gather(1, idx)
    a1 = arcs.gather(1, idx + 1)
    den = a1 - a0
    frac = torch.where(den > 0, (q - a0) / torch.where(den > 0, den, torch.ones_like(den)), torch.zeros_like(q))
    frac = frac.clamp(0.0, 1.0)
    C = vals.shape[-1]
    v0 = vals.gather(1, idx[..., None].expand(-1, -1, C))
    v1 = vals.gather(1, (idx + 1)[..., None].expand(-1, -1, C))
    return v0 + frac[..., None] * (v1 - v0)


def rollout_batch(net: GeneratorNet, b: LocalBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable autoregressive rollout; returns (controls, poses) in the start frame."""
    cfg = net.cfg
    B = b.feats0.shape[0]
    zeros = torch.zeros(B, dtype=b.feats0.dtype)
    x, y, th = zeros, zeros, zeros
    v, gam = b.v0, b.gamma0
    hint = zeros
    feats = b.feats0
    offsets = cfg.d_s * torch.arange(1, cfg.n_waypoints + 1, dtype=feats.dtype)
    all_u, poses = [], []
    for j in range(cfg.n_inferences):
        if j > 0:
            sig = _project(x, y, b.pts, b.arcs, hint)
            hint = sig
            world = _interp(sig[:, None] + offsets[None, :], b.arcs, b.pts)
            c, s = torch.cos(th)[:, None], torch.sin(th)[:, None]
            dx, dy = world[..., 0] - x[:, None], world[..., 1] - y[:, None]
            wp = torch.stack([c * dx + s * dy, -s * dx + c * dy], dim=-1).reshape(B, -1)
            if b.vt is not None:
                vt = _interp(sig[:, None], b.arcs, b.vt[..., None])[:, 0, 0]
            else:
                vt = b.feats0[:, 4]
            u_last = all_u[-1][:, -1]
            feats = torch.cat([torch.stack([v, gam, u_last[:, 0], u_last[:, 1], vt], dim=1), wp], dim=1)
        u = net(feats)
        all_u.append(u)
        for i in range(cfg.chunk):
            a, w = u[:, i, 0], u[:, i, 1]
            x, y, th, v, gam = (
                x + cfg.dt * v * torch.cos(th),
                y + cfg.dt * v * torch.sin(th),
                th + cfg.dt * v / cfg.wheelbase * torch.tan(gam),
                v + cfg.dt * a,
                gam + cfg.dt * w,
            )
            if cfg.forward_only:
                v = v.clamp(min=0.0)
            gam = gam.clamp(-cfg.gamma_max, cfg.gamma_max)
            poses.append(torch.stack([x, y, th], dim=1))
    return torch.cat(all_u, dim=1), torch.stack(poses, dim=1)


def pose_loss_batch(pred, gt, lam: float, theta_weight: float = 1.0) -> torch.Tensor:
    """Per-sample discounted pose loss (B,)."""
    d = pred - gt
    dth = torch.atan2(torch.sin(d[..., 2]), torch.cos(d[..., 2]))
    w = lam ** torch.arange(pred.shape[1], dtype=pred.dtype)
    return (w * (d[..., 0] ** 2 + d[..., 1] ** 2 + theta_weight * dth**2)).sum(dim=1)


def control_loss_batch(pred_u, gt_u, lam: float) -> torch.Tensor:
    """Per-sample discounted squared control error (B,)."""
    w = lam ** torch.arange(pred_u.shape[1], dtype=pred_u.dtype)
    return (w * ((pred_u - gt_u) ** 2).sum(-1)).sum(dim=1)


def normalization_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    f = features(ds.states)
    mean = f.mean(axis=0)
    std = f.std(axis=0)
    # constant features are centred only; dividing by a tiny spread would amplify later-chunk deviations
    std = np.where(std < 1e-3, 1.0, std)
    return mean, std


def train(ds: Dataset, gen_cfg: GeneratorConfig, train_cfg: TrainConfig, progress=None):
    """Fit a generator to ``ds`` by back-propagating the pose loss through the rollout.

    A pose loss alone barely constrains the first control of a chunk (an
    acceleration reaches the poses two steps later, and not at all through
    the forward-only clamp at standstill), yet deployment executes exactly
    that control.  ``train_cfg.control_weight`` adds a discounted squared
    error against the recorded controls to pin it down.

    Returns ``(TrajectoryGenerator, TrainingReport)``.
    """
    if len(ds) == 0:
        raise TrainingError("dataset is empty")
    t0 = time.perf_counter()
    torch.manual_seed(train_cfg.seed)
    mean, std = normalization_stats(ds)
    net = GeneratorNet(gen_cfg, mean.astype(np.float32), std.astype(np.float32))
    data = local_tables(ds, gen_cfg)
    opt = torch.optim.AdamW(
        net.parameters(), lr=train_cfg.lr, betas=train_cfg.betas, weight_decay=train_cfg.weight_decay
    )
    gen = torch.Generator().manual_seed(train_cfg.seed)
    N = len(ds)
    report = None
    for epoch in range(train_cfg.epochs):
        perm = torch.randperm(N, generator=gen)
        total = total_u = 0.0
        for start in range(0, N, train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            batch = data.index(idx)
            u, poses = rollout_batch(net, batch)
            per_sample = pose_loss_batch(poses, batch.gt, train_cfg.lam, train_cfg.theta_weight)
            per_u = control_loss_batch(u, batch.u, train_cfg.lam)
            loss = per_sample.mean() + train_cfg.control_weight * per_u.mean()
            if not torch.isfinite(loss):
                bad = idx[~torch.isfinite(per_sample)]
                norms = {n: float(p.grad.norm()) for n, p in net.named_parameters() if p.grad is not None}
                raise TrainingError(
                    f"non-finite loss in epoch {epoch + 1}; offending sample(s) {bad[:10].tolist()}; "
                    f"last gradient norms {norms}"
                )
            if report is None:
                report = TrainingReport(initial_loss=float(per_sample.detach().mean()))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(per_sample.detach().sum())
            total_u += float(per_u.detach().sum())
        report.epoch_losses.append(total / N)
        report.epoch_control_losses.append(total_u / N)
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, train_cfg.epochs, report.epoch_losses[-1])
        if progress:
            progress(epoch + 1, report.epoch_losses[-1])
    report.seconds = time.perf_counter() - t0
    return net.to_generator(), report


@torch.no_grad()
def evaluate_open_loop(model: TrajectoryGenerator, ds: Dataset, batch_size: int = 1024) -> np.ndarray:
    """Mean position error (N_H,) of the model's rollouts against ``ds`` (float64)."""
    net = GeneratorNet.from_generator(model)
    data = local_tables(ds, model.config, dtype=torch.float64)
    errs = []
    for start in range(0, len(ds), batch_size):
        b = data.index(slice(start, start + batch_size))
        _, poses = rollout_batch(net, b)
        errs.append(torch.hypot(poses[..., 0] - b.gt[..., 0], poses[..., 1] - b.gt[..., 1]))
    return torch.cat(errs).mean(dim=0).numpy()


def loss_and_grad(model: TrajectoryGenerator, ds: Dataset, lam: float = 0.8, theta_weight: float = 1.0):
    """Summed pose loss over ``ds`` and its gradient w.r.t. every weight (float64 autograd).

    The gradient is returned as a list matching ``model.weights``.
    """
    net = GeneratorNet.from_generator(model)
    data = local_tables(ds, model.config, dtype=torch.float64)
    _, poses = rollout_batch(net, data)
    loss = pose_loss_batch(poses, data.gt, lam, theta_weight).sum()
    loss.backward()
    linears = [m for m in net.mlp if isinstance(m, nn.Linear)]
    grads = [(lin.weight.grad.numpy().copy(), lin.bias.grad.numpy().copy()) for lin in linears]
    return float(loss.detach()), grads
