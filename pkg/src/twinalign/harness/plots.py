"""Three-panel alignment figure (longitudinal band, lateral deviation, velocity difference)."""

from __future__ import annotations

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..runtime import AlignmentEvent  # noqa: E402

log = logging.getLogger(__name__)


def emit_plots(records, filename) -> str | None:
    """Write the figure to ``filename`` (format from the suffix, e.g. .svg or .pdf).

    Returns the filename, or ``None`` (with a warning) for an empty log.
    """
    records = list(records)
    if not records:
        log.warning("empty log, no plot written")
        return None
    t = np.array([r.t for r in records])
    col = lambda name: np.array([getattr(r, name) for r in records])  # noqa: E731
    sigma_R, sigma_ref, sigma_lower, sigma_V = col("sigma_R"), col("sigma_ref"), col("sigma_lower"), col("sigma_V")
    freeze = np.array([AlignmentEvent(r.event) is AlignmentEvent.FREEZE for r in records])
    ff = np.array([AlignmentEvent(r.event) is AlignmentEvent.FAST_FORWARD for r in records])

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 7))
    ax = axes[0]
    ax.fill_between(t, sigma_lower - sigma_ref, sigma_V - sigma_ref, color="tab:green", alpha=0.3, label="admissible band")
    ax.plot(t, sigma_R - sigma_ref, color="tab:blue", lw=1, label="real")
    ax.axhline(0.0, color="k", lw=0.6, label="reference")
    ax.plot(t[freeze], (sigma_R - sigma_ref)[freeze], "v", color="tab:red", ms=3, label="freeze")
    ax.plot(t[ff], (sigma_R - sigma_ref)[ff], "^", color="tab:orange", ms=3, label="fast-forward")
    ax.set_ylabel("sigma - sigma_ref [m]")
    ax.legend(loc="upper right", fontsize=7, ncol=3)
    axes[1].plot(t, col("d"), color="tab:blue", lw=1)
    axes[1].set_ylabel("lateral d [m]")
    axes[2].plot(t, col("v_V") - col("v_R"), color="tab:blue", lw=1)
    axes[2].set_ylabel("v_V - v_R [m/s]")
    axes[2].set_xlabel("time [s]")
    for a in axes:
        a.grid(alpha=0.3)
    fig.tight_layout()
    fmt = str(filename).rsplit(".", 1)[-1].lower()
    metadata = {"Date": None} if fmt == "svg" else {"CreationDate": None} if fmt == "pdf" else None
    # fixed salt keeps SVG element ids, and hence the file, reproducible
    with plt.rc_context({"svg.hashsalt": "twinalign"}):
        fig.savefig(filename, metadata=metadata)
    plt.close(fig)
    return str(filename)
