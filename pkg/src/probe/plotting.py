"""Reproducible SVG line plots."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed salt and no date so repeated runs write identical files.
matplotlib.rcParams["svg.hashsalt"] = "probe"
matplotlib.rcParams["svg.fonttype"] = "none"


def line_plot(path, series: list[tuple], title: str = "", xlabel: str = "x",
              ylabel: str = "", logy: bool = False) -> None:
    """``series`` holds (x, y, label) triples."""
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for x, y, label in series:
            ax.plot(x, y, label=label, linewidth=1.5)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if logy:
            ax.set_yscale("symlog", linthresh=1e-3)
        if any(label for _, _, label in series):
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)


def loss_plot(path, losses, title: str = "training loss") -> None:
    line_plot(path, [(list(range(len(losses))), list(losses), "")], title, "epoch", "mean loss")
