"""Static figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_traces(traces: dict, path) -> Path:
    """Relative change per round on a log axis, one line per method."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, values in traces.items():
        values = np.asarray(values, dtype=float)
        if values.size:
            ax.semilogy(np.arange(1, values.size + 1), values, marker="o", ms=3, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative change")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_slices(images: dict, path, vmin: float = 0.0, vmax: float | None = None) -> Path:
    """Side-by-side grey-scale montage of one slice per method."""
    path = Path(path)
    n = len(images)
    if vmax is None:
        vmax = max(float(np.max(im)) for im in images.values()) if n else 1.0
    fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6), squeeze=False)
    for ax, (name, im) in zip(axes[0], images.items()):
        ax.imshow(im, cmap="gray", vmin=vmin, vmax=vmax, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
