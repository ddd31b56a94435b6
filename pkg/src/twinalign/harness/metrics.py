"""Alignment metrics over a run log."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..runtime import AlignmentEvent


@dataclass(frozen=True)
class MetricsSummary:
    mean_long: float
    max_long: float
    mean_lat: float
    max_lat: float
    mean_vel: float
    max_vel: float
    counts: dict = field(default_factory=dict)
    distance: float = 0.0
    n_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records) -> MetricsSummary:
    """Mean/max absolute longitudinal, lateral and velocity errors plus event counts.

    Longitudinal error is ``sigma_ref - sigma_R``, lateral error ``d`` and the
    velocity error ``v_V - v_R`` with ``v_V`` taken at the reference index.
    Works in a single pass, so any iterable of records will do.
    """
    n = 0
    sums = [0.0, 0.0, 0.0]
    maxes = [0.0, 0.0, 0.0]
    counts = {e.value: 0 for e in AlignmentEvent}
    first = last = None
    for r in records:
        errs = (abs(r.sigma_ref - r.sigma_R), abs(r.d), abs(r.v_V - r.v_R))
        for i, e in enumerate(errs):
            sums[i] += e
            maxes[i] = max(maxes[i], e)
        counts[AlignmentEvent(r.event).value] += 1
        if first is None:
            first = r.sigma_R
        last = r.sigma_R
        n += 1
    if n == 0:
        raise ValueError("cannot summarize an empty log")
    return MetricsSummary(
        mean_long=sums[0] / n,
        max_long=maxes[0],
        mean_lat=sums[1] / n,
        max_lat=maxes[1],
        mean_vel=sums[2] / n,
        max_vel=maxes[2],
        counts=counts,
        distance=last - first,
        n_steps=n,
    )


def format_summary(m: MetricsSummary) -> str:
    lines = [
        f"steps             {m.n_steps}",
        f"distance [m]      {m.distance:.1f}",
        f"longitudinal [m]  mean {m.mean_long:.4f}  max {m.max_long:.4f}",
        f"lateral [m]       mean {m.mean_lat:.4f}  max {m.max_lat:.4f}",
        f"velocity [m/s]    mean {m.mean_vel:.4f}  max {m.max_vel:.4f}",
        "events            " + "  ".join(f"{k}={v}" for k, v in m.counts.items()),
    ]
    return "\n".join(lines)
