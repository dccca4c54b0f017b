"""Figures written next to the CSV/JSON outputs. Always uses the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .audio import VIDEO_FPS  # noqa: E402

STYLE = {
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
    "figure.facecolor": "white",
    "font.size": 8,
    "image.interpolation": "nearest",
    "legend.fontsize": 7,
    "legend.frameon": False,
    "lines.linewidth": 0.8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

STREAM_COLORS = {"voice": "#c0392b", "music": "#2471a3"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _shade(ax, mask, t, color="0.85"):
    """Grey bands over the frames where ``mask`` is set."""
    m = np.concatenate([[False], np.asarray(mask, bool), [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(m))
    for a, b in zip(edges[::2], edges[1::2]):
        ax.axvspan(t[a], t[b - 1], color=color, lw=0, zorder=0)


def attention_heatmap(grid, path, title: str = "") -> Path:
    """Time x channel attention; the dashed line splits voice and music channels."""
    grid = np.asarray(grid)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 2.6))
        T = len(grid)
        im = ax.imshow(grid.T, aspect="auto", origin="lower", cmap="magma", vmin=0.0, vmax=1.0,
                       extent=(0, T / VIDEO_FPS, 0, grid.shape[1]))
        ax.axhline(grid.shape[1] / 2, color="w", ls="--", lw=0.6)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("channel (voice | music)")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, pad=0.01, fraction=0.03)
        return _save(fig, path)


def attention_halves_figure(summaries: dict, path) -> Path:
    """Voice-half and music-half mean attention per task, voice-silent frames shaded."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(summaries), 1, figsize=(7.0, 1.5 * len(summaries)), sharex=True)
        axes = np.atleast_1d(axes)
        for ax, (task, s) in zip(axes, summaries.items()):
            t = np.arange(len(s.voice_mean)) / VIDEO_FPS
            _shade(ax, s.silent, t)
            ax.plot(t, s.voice_mean, color=STREAM_COLORS["voice"], label="voice half")
            ax.plot(t, s.music_mean, color=STREAM_COLORS["music"], label="music half")
            ax.set_ylabel(task)
        axes[0].legend(loc="upper right", ncol=2)
        axes[-1].set_xlabel("time (s); shaded = voice silent")
        return _save(fig, path)


def tracks_figure(result, path) -> Path:
    """Expression energy, head rotation and eye state of a generated result."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 1, figsize=(7.0, 4.2), sharex=True)
        t = np.arange(len(result)) / VIDEO_FPS
        axes[0].plot(t, np.linalg.norm(result.expr - result.expr.mean(0), axis=1), color="k")
        axes[0].set_ylabel("|expr - mean|")
        for j, name in enumerate(("rx", "ry", "rz")):
            axes[1].plot(t, result.pose[:, j], label=name)
        axes[1].set_ylabel("rotation")
        axes[1].legend(loc="upper right", ncol=3)
        axes[2].plot(t, result.eye, color="k", label="eye")
        axes[2].plot(t, result.eye_long, color=STREAM_COLORS["music"], ls="--", label="long closure")
        axes[2].set_ylabel("eye")
        axes[2].set_ylim(-0.05, 1.05)
        axes[2].legend(loc="upper right", ncol=2)
        axes[-1].set_xlabel("time (s)")
        return _save(fig, path)


def training_curves(records: list[dict], path, keys=("l_exp", "l_pose", "l_eye", "l_att", "l_adv_d")) -> Path:
    """Loss components against step, from the JSON-lines training log."""
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for k in keys:
            ax.plot(steps, [max(r[k], 1e-12) for r in records], label=k)
        ax.set_yscale("log")
        ax.set_xlabel("generator step")
        ax.set_ylabel("loss")
        ax.legend(loc="upper right")
        return _save(fig, path)


def metrics_figure(per_seq: dict, path, fields=("cca_pose_speed", "cca_eye")) -> Path:
    """Per-sequence bar chart of the CCA metrics."""
    names = list(per_seq)
    x = np.arange(len(names))
    w = 0.8 / len(fields)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.5 * len(names) + 1.5), 2.6))
        for i, f in enumerate(fields):
            ax.bar(x + i * w, [getattr(per_seq[n], f) for n in names], w, label=f)
        ax.set_xticks(x + w * (len(fields) - 1) / 2, names, rotation=45, ha="right")
        ax.set_ylim(0, 1)
        ax.legend(loc="upper right")
        return _save(fig, path)
