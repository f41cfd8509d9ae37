"""Static report figures (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed salt and no timestamp so SVG output is byte-reproducible
plt.rcParams["svg.hashsalt"] = "pose6d"


def _save(fig, path):
    path = str(path)
    meta = {"Date": None} if path.endswith((".svg", ".pdf")) else {}
    if path.endswith(".png"):
        meta = {"Software": None}
    fig.savefig(path, metadata=meta)
    plt.close(fig)


def plot_accuracy_curve(curve, path, title="2D projection accuracy", label=None):
    """Fraction of correct poses against the reprojection threshold."""
    xs = [t for t, _ in curve]
    ys = [100.0 * f for _, f in curve]
    fig, ax = plt.subplots(figsize=(4.5, 3.4), dpi=100)
    ax.plot(xs, ys, lw=1.8, color="tab:blue", label=label)
    ax.axvline(5.0, color="0.6", lw=0.8, ls="--")
    ax.set_xlim(0, max(xs) if xs else 1)
    ax.set_ylim(0, 101)
    ax.set_xlabel("reprojection threshold (px)")
    ax.set_ylabel("correct poses (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if label:
        ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_confidence_function(path, alpha=2.0, d_th=30.0):
    import numpy as np

    from .gridcodec import confidence

    d = np.linspace(0, 1.2 * d_th, 400)
    fig, ax = plt.subplots(figsize=(4.0, 3.0), dpi=100)
    ax.plot(d, confidence(d, alpha, d_th), color="tab:red")
    ax.set_xlabel("distance to true point (px)")
    ax.set_ylabel("confidence")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
