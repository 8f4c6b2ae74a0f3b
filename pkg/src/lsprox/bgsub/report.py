"""Figures written next to the tab-delimited run outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}
# no timestamps or version strings, so reruns are byte-identical
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def plot_history(path, series, ylabel="loss", logy=True):
    """Line plot of one or more per-step histories."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for name, values in series.items():
            if len(values):
                ax.plot(np.arange(len(values)), values, label=name, lw=1)
        if logy and any(len(v) and min(v) > 0 for v in series.values()):
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_panels(path, panels, ncols=None):
    """Grid of grayscale images; `panels` is a list of (title, image)."""
    n = len(panels)
    ncols = ncols or n
    nrows = -(-n // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.8 * ncols, 1.9 * nrows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for ax, (title, img) in zip(axes.flat, panels):
            ax.imshow(img, cmap="gray", interpolation="nearest")
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_frame_scores(path, ids, scores, label="F1"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3, 0.25 * len(ids)), 3))
        x = np.arange(len(ids))
        ax.bar(x, np.nan_to_num(scores), color="0.4")
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90)
        ax.set_ylim(0, 1)
        ax.set_ylabel(label)
        fig.tight_layout()
        _save(fig, path)
