"""Figures written next to the results tables."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_session_accuracy(curves: dict[str, list[float]], path, title: str = "") -> Path:
    """One line per method: top-1 accuracy (%) against session index."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, accs in curves.items():
            ax.plot(range(len(accs)), [100 * a for a in accs], marker="o", ms=3, label=name)
        ax.set_xlabel("session")
        ax.set_ylabel("top-1 accuracy (%)")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_base_new(reports, path, title: str = "") -> Path:
    """Accuracy on base-session classes vs classes added later."""
    sessions = [r.session_id for r in reports]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(sessions, [100 * r.top1 for r in reports], marker="o", ms=3, label="all")
        ax.plot(sessions, [100 * r.top1_base for r in reports], marker="s", ms=3, label="base classes")
        new = [(r.session_id, 100 * r.top1_new) for r in reports if r.top1_new is not None]
        if new:
            ax.plot(*zip(*new), marker="^", ms=3, label="new classes")
        ax.set_xlabel("session")
        ax.set_ylabel("top-1 accuracy (%)")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_sweep(axis: str, values, avgs, lasts, path) -> Path:
    labels = [str(v) for v in values]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(labels, [100 * a for a in avgs], marker="o", label="Avg.")
        ax.plot(labels, [100 * a for a in lasts], marker="s", label="last session")
        ax.set_xlabel(axis)
        ax.set_ylabel("top-1 accuracy (%)")
        ax.legend()
        return _save(fig, path)
