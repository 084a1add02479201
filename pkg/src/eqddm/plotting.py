"""Matplotlib rendering of rolling predictions.

One figure per joint: a panel per axis with the truth (blue), the prediction
(red) and its shaded band, over a strip coloured by the inferred state.
Figures are written with fixed SVG ids and no timestamp so reruns produce the
same bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .data import AXES  # noqa: E402
from .evaluation import BAND_Z, Prediction, plot_series  # noqa: E402

golden_mean = (np.sqrt(5.0) - 1.0) / 2.0
fig_width = 7.0

TRUTH_COLOR = "#1f4e9c"
PRED_COLOR = "#c8102e"
STATE_COLORS = ["#a8ddb5", "#4eb3d3", "#fdae6b", "#bcbddc", "#fc9272", "#d9d9d9"]

params = {
    "font.family": "serif",
    "font.size": 8,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.0,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "svg.hashsalt": "eqddm",
    "svg.fonttype": "path",
}

FORMATS = ("svg", "png", "pdf")


def joint_figure(pred: Prediction, joint: int, title: str | None = None):
    """Build (but do not save) the figure for one joint."""
    cols = plot_series(pred, joint)
    t = cols["t"]
    with plt.rc_context(params):
        fig, axes = plt.subplots(
            4,
            1,
            sharex=True,
            figsize=(fig_width, fig_width * golden_mean * 1.3),
            gridspec_kw={"height_ratios": [3, 3, 3, 0.6]},
        )
        for ax, name in zip(axes[:3], AXES):
            ax.fill_between(
                t,
                cols[f"lower_{name}"],
                cols[f"upper_{name}"],
                color=PRED_COLOR,
                alpha=0.2,
                linewidth=0,
                label=rf"$\pm{BAND_Z:g}\sigma$",
            )
            ax.plot(t, cols[f"truth_{name}"], color=TRUTH_COLOR, label="truth")
            ax.plot(t, cols[f"pred_{name}"], color=PRED_COLOR, label="prediction")
            ax.set_ylabel(name)
            ax.spines["top"].set_visible(False)
            ax.spines["right"].set_visible(False)
        axes[0].legend(loc="lower right", bbox_to_anchor=(1.0, 1.0), ncol=3, frameon=False)
        n_states = max(int(pred.q_state.shape[1]), 1)
        cmap = ListedColormap([STATE_COLORS[i % len(STATE_COLORS)] for i in range(n_states)])
        strip = axes[3]
        strip.imshow(
            cols["state"][None, :],
            aspect="auto",
            cmap=cmap,
            vmin=-0.5,
            vmax=n_states - 0.5,
            extent=(t[0] - 0.5, t[-1] + 0.5, 0, 1),
            interpolation="nearest",
        )
        strip.set_yticks([])
        strip.set_ylabel("state", rotation=0, ha="right", va="center")
        strip.set_xlabel("t")
        if title:
            axes[0].set_title(title, loc="left")
        fig.align_ylabels(axes)
    return fig


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ValueError(f"unsupported figure format {fmt!r}; use one of {FORMATS}")
    metadata = {"svg": {"Date": None}, "pdf": {"CreationDate": None}}.get(fmt, {})
    with plt.rc_context(params):
        fig.savefig(path, format=fmt, metadata=metadata)
    plt.close(fig)
    return path


def plot_prediction(
    pred: Prediction, out_dir: str | Path, stem: str | None = None, formats: tuple[str, ...] = ("svg",)
) -> list[Path]:
    """Render every joint of ``pred`` to ``out_dir/<stem>_joint<j>.<fmt>``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or pred.name or "prediction"
    paths = []
    for j in range(pred.truth.n_joints):
        for fmt in formats:
            fig = joint_figure(pred, j, title=f"{stem}, joint {j}")
            paths.append(save_figure(fig, out_dir / f"{stem}_joint{j}.{fmt}"))
    return paths
