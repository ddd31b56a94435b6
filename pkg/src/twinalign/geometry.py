"""Random path generation, polyline resampling and curvilinear projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import wrap_angle

MIN_SPACING = 1e-6
TIE_TOL = 1e-9


class PathError(ValueError):
    pass


class PathExhaustedError(RuntimeError):
    """The vehicle has run past the end of its reference path."""


@dataclass(frozen=True, eq=False)
class Path:
    """Open waypoint polyline with cumulative arc length.

    ``v_target`` optionally holds a per-waypoint target speed.
    """

    waypoints: np.ndarray
    v_target: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise PathError("waypoints must have shape (n, 2)")
        if len(pts) < 2:
            raise PathError("a path needs at least two waypoints")
        if not np.all(np.isfinite(pts)):
            raise PathError("waypoints must be finite")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= MIN_SPACING):
            i = int(np.argmax(seg <= MIN_SPACING))
            raise PathError(f"waypoints {i} and {i + 1} coincide")
        pts.setflags(write=False)
        object.__setattr__(self, "waypoints", pts)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        s.setflags(write=False)
        object.__setattr__(self, "arclength", s)
        if self.v_target is not None:
            vt = np.array(self.v_target, dtype=float)
            if vt.shape != (len(pts),):
                raise PathError("v_target needs one value per waypoint")
            vt.setflags(write=False)
            object.__setattr__(self, "v_target", vt)

    def __len__(self):
        return len(self.waypoints)

    def __eq__(self, other):
        if not isinstance(other, Path):
            return NotImplemented
        if (self.v_target is None) != (other.v_target is None):
            return False
        same_vt = self.v_target is None or np.array_equal(self.v_target, other.v_target)
        return np.array_equal(self.waypoints, other.waypoints) and same_vt

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def point_at(self, s) -> np.ndarray:
        """Interpolated position(s) at arc length ``s``; clipped to the path ends."""
        s = np.asarray(s, dtype=float)
        x = np.interp(s, self.arclength, self.waypoints[:, 0])
        y = np.interp(s, self.arclength, self.waypoints[:, 1])
        return np.stack([x, y], axis=-1)

    def target_speed_at(self, s: float, default: float | None = None) -> float:
        if self.v_target is None:
            if default is None:
                raise PathError("path has no v_target column")
            return default
        return float(np.interp(s, self.arclength, self.v_target))

    def with_target_speed(self, v_target) -> "Path":
        vt = np.broadcast_to(np.asarray(v_target, dtype=float), (len(self),))
        return Path(self.waypoints, vt)


@dataclass(frozen=True)
class CurvilinearState:
    sigma: float
    d: float
    delta_psi: float
    segment: int = 0
    fraction: float = 0.0
    ref_heading: float = 0.0
    beyond_end: bool = False


# --------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class OUConfig:
    theta_ou: float = 0.05
    sigma_ou: float = 0.005
    mu: float = 0.0
    kappa_max: float = 0.1
    step_len: float = 1.0
    n_points: int = 500
    kappa0: float = 0.0
    heading0: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.theta_ou < 0 or self.sigma_ou < 0:
            raise ValueError("theta_ou and sigma_ou must be >= 0")
        if self.kappa_max <= 0:
            raise ValueError("kappa_max must be positive")
        if self.step_len <= 0:
            raise ValueError("step_len must be positive")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")


def generate_ou_path(cfg: OUConfig) -> Path:
    """Integrate an Ornstein-Uhlenbeck curvature process into a waypoint list.

    The path starts with two collinear points.  Each further step updates the
    curvature (mean-reverting toward ``mu``, then clamped to ``kappa_max``),
    turns the heading by ``kappa * step_len`` and moves ``step_len`` forward.
    """
    rng = np.random.default_rng(cfg.seed)
    pts = np.empty((cfg.n_points, 2))
    heading = cfg.heading0
    pts[0] = (0.0, 0.0)
    pts[1] = (cfg.step_len * math.cos(heading), cfg.step_len * math.sin(heading))
    kappa = cfg.kappa0
    xi = rng.standard_normal(max(cfg.n_points - 2, 0))
    for i in range(2, cfg.n_points):
        kappa = kappa + cfg.theta_ou * (cfg.mu - kappa) + cfg.sigma_ou * xi[i - 2]
        kappa = min(max(kappa, -cfg.kappa_max), cfg.kappa_max)
        heading += kappa * cfg.step_len
        pts[i, 0] = pts[i - 1, 0] + cfg.step_len * math.cos(heading)
        pts[i, 1] = pts[i - 1, 1] + cfg.step_len * math.sin(heading)
    return Path(pts)


def add_waypoint_noise(p: Path, std: float, seed) -> Path:
    """Add independent N(0, std^2) noise to every waypoint coordinate."""
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return p
    rng = np.random.default_rng(seed)
    return Path(p.waypoints + rng.normal(0.0, std, size=p.waypoints.shape), p.v_target)


def resample_arclength(p: Path, d_s: float) -> Path:
    """Resample ``p`` at multiples of ``d_s`` along its polyline.

    The final waypoint is appended when the last multiple falls short of it.
    """
    if d_s <= 0:
        raise ValueError("d_s must be positive")
    total = p.length
    if total < d_s * (1 - 1e-9):
        raise PathError(f"path length {total:.6g} m is shorter than d_s={d_s}")
    n = int(math.floor(total / d_s + 1e-9))
    s = d_s * np.arange(n + 1)
    s[-1] = min(s[-1], total)
    if total - s[-1] > MIN_SPACING * 10:
        s = np.append(s, total)
    pts = p.point_at(s)
    vt = None
    if p.v_target is not None:
        vt = np.interp(s, p.arclength, p.v_target)
    return Path(pts, vt)


def discrete_curvature(points: np.ndarray) -> np.ndarray:
    """Menger curvature of each interior vertex of a polyline."""
    a = points[1:-1] - points[:-2]
    b = points[2:] - points[1:-1]
    c = points[2:] - points[:-2]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    la, lb, lc = (np.hypot(*v.T) for v in (a, b, c))
    return 2.0 * cross / (la * lb * lc)


# --------------------------------------------------------------------------
# projection


def project_polyline(
    points: np.ndarray,
    arcs: np.ndarray,
    pose,
    headings: np.ndarray | None = None,
    hint: float | None = None,
    window: float = 20.0,
    extrapolate: bool = False,
) -> CurvilinearState:
    """Nearest-point projection of ``pose`` onto a polyline.

    Zero-length segments are allowed; their direction is taken from
    ``headings``.  When ``headings`` is given the reference heading is
    interpolated from it, otherwise the segment direction is used.  Near-ties
    between segments resolve toward the larger arc length.

    With ``extrapolate`` a pose past either end continues the arc length
    along the end heading instead of clamping, so a point ahead of the
    final vertex gets ``sigma > arcs[-1]``.
    """
    px, py, theta = float(pose[0]), float(pose[1]), float(pose[2])
    lo, hi = 0, len(points) - 1
    if hint is not None:
        lo = max(int(np.searchsorted(arcs, hint - window, side="right")) - 1, 0)
        hi = min(int(np.searchsorted(arcs, hint + window, side="left")) + 1, len(points) - 1)
        if hi <= lo:
            lo, hi = max(hi - 1, 0), max(hi, 1)
    p0 = points[lo:hi]
    seg = points[lo + 1 : hi + 1] - p0
    seg_len2 = seg[:, 0] ** 2 + seg[:, 1] ** 2
    off = np.stack([px - p0[:, 0], py - p0[:, 1]], axis=1)
    degenerate = seg_len2 <= 1e-18
    safe_len2 = np.where(degenerate, 1.0, seg_len2)
    t = np.clip((off[:, 0] * seg[:, 0] + off[:, 1] * seg[:, 1]) / safe_len2, 0.0, 1.0)
    t = np.where(degenerate, 0.0, t)
    fx = p0[:, 0] + t * seg[:, 0]
    fy = p0[:, 1] + t * seg[:, 1]
    dist2 = (px - fx) ** 2 + (py - fy) ** 2
    seg_arc = arcs[lo + 1 : hi + 1] - arcs[lo:hi]
    sig = arcs[lo:hi] + t * seg_arc

    best = float(dist2.min())
    cand = np.flatnonzero(dist2 <= best + TIE_TOL)
    k = int(cand[np.lexsort((cand, sig[cand]))[-1]])
    i = lo + k
    tk = float(t[k])

    if degenerate[k]:
        if headings is None:
            raise PathError("degenerate segment without heading information")
        ux, uy = math.cos(headings[i]), math.sin(headings[i])
    else:
        l = math.sqrt(seg_len2[k])
        ux, uy = seg[k, 0] / l, seg[k, 1] / l
    ox, oy = px - float(fx[k]), py - float(fy[k])
    cross = ux * oy - uy * ox
    at_end = (i == 0 and tk == 0.0) or (i == len(points) - 2 and tk == 1.0) or degenerate[k]
    if at_end or 0.0 < tk < 1.0:
        d = cross
    else:
        d = math.copysign(math.hypot(ox, oy), cross)

    along = ux * ox + uy * oy
    beyond = i == len(points) - 2 and tk == 1.0 and along > 1e-9
    sigma = float(sig[k])
    if extrapolate and ((sigma >= arcs[-1] and along > 0) or (sigma <= arcs[0] and along < 0)):
        sigma += along
        d = cross
        beyond = along > 0
    if headings is not None:
        h0, h1 = headings[i], headings[i + 1]
        ref = h0 + tk * wrap_angle(h1 - h0)
    else:
        ref = math.atan2(uy, ux)
    return CurvilinearState(
        sigma=sigma,
        d=float(d),
        delta_psi=wrap_angle(theta - ref),
        segment=i,
        fraction=tk,
        ref_heading=wrap_angle(ref),
        beyond_end=bool(beyond),
    )


def project_curvilinear(pose, reference: Path, hint: float | None = None) -> CurvilinearState:
    """Project a pose ``(x, y, theta)`` onto ``reference``.

    With ``hint`` (a previous arc position) only segments within 20 m of it
    are searched.
    """
    return project_polyline(reference.waypoints, reference.arclength, pose, hint=hint)


def pose_from_curvilinear(reference: Path, sigma: float, d: float) -> np.ndarray:
    """Point at lateral offset ``d`` (left positive) from arc position ``sigma``."""
    i = int(np.clip(np.searchsorted(reference.arclength, sigma, side="right") - 1, 0, len(reference) - 2))
    seg = reference.waypoints[i + 1] - reference.waypoints[i]
    u = seg / np.hypot(*seg)
    foot = reference.point_at(sigma)
    return foot + d * np.array([-u[1], u[0]])


def path_headings(points: np.ndarray) -> np.ndarray:
    """Per-waypoint heading of a polyline (last copies the previous)."""
    seg = np.diff(points, axis=0)
    h = np.arctan2(seg[:, 1], seg[:, 0])
    return np.append(h, h[-1])
