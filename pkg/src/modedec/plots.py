"""Static SVG line plots of predicted components against their labels."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_components(path, t, pred, label=None, title: str | None = None) -> None:
    """One panel per component, prediction solid and label dashed."""
    pred = np.atleast_2d(pred)
    n = pred.shape[0]
    fig, axes = plt.subplots(n, 1, figsize=(8, 1.8 * n + 0.6), sharex=True, squeeze=False)
    for m, ax in enumerate(axes[:, 0]):
        ax.plot(t, pred[m], lw=0.9, label="predicted")
        if label is not None:
            ax.plot(t, np.atleast_2d(label)[m], lw=0.9, ls="--", label="label")
        ax.set_ylabel(f"imf{m + 1}")
    axes[0, 0].legend(loc="upper right", fontsize="small")
    axes[-1, 0].set_xlabel("t")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    # A fixed hash salt and no date keeps repeated runs byte-identical.
    with matplotlib.rc_context({"svg.hashsalt": "modedec"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
