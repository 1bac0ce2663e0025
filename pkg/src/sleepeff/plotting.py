"""Matplotlib figures written next to the CSV/JSON reports."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def new_figure(width=5.0, height=3.2):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(histories: dict, path, metric="train_mae"):
    """Per-epoch training curve for every CNN."""
    fig, ax = new_figure()
    for model_id, history in sorted(histories.items()):
        epochs = [e["epoch"] for e in history]
        ax.plot(epochs, [e[metric] for e in history], marker="o", ms=2.5, lw=1.2, label=model_id)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_yscale("log")
    ax.legend(frameon=False, ncol=2)
    return save(fig, path)


def plot_metrics(rows, path):
    """Test MAE per model as horizontal bars, best at the top."""
    rows = sorted(rows, key=lambda r: r.mae, reverse=True)
    fig, ax = new_figure(height=0.35 * len(rows) + 0.8)
    labels = [r.model for r in rows]
    colors = ["0.6" if r.model == "baseline-mean" else "C0" for r in rows]
    ax.barh(labels, [r.mae for r in rows], color=colors)
    for i, r in enumerate(rows):
        ax.text(r.mae, i, f" {r.mae:.4f}", va="center", fontsize=7)
    ax.set_xlabel("test MAE")
    return save(fig, path)


def plot_importance(importance, path):
    """Top-k mean-decrease-in-impurity scores."""
    entries = list(importance.entries)[::-1]
    fig, ax = new_figure(width=5.5, height=0.22 * len(entries) + 0.8)
    ax.barh([name for name, _ in entries], [score for _, score in entries], color="C2")
    ax.set_xlabel("importance")
    ax.set_title(f"top {importance.k} features")
    return save(fig, path)


def plot_ablation(ablation, path):
    rows = ablation.rows
    fig, ax = new_figure(height=0.35 * len(rows) + 1.0)
    y = range(len(rows))
    ax.barh([i + 0.2 for i in y], [r.mae_full for r in rows], height=0.4, label="all features")
    ax.barh([i - 0.2 for i in y], [r.mae_reduced for r in rows], height=0.4,
            label=f"top {ablation.k}")
    ax.set_yticks(list(y))
    ax.set_yticklabels([r.model for r in rows])
    ax.set_xlabel("test MAE")
    ax.legend(frameon=False)
    return save(fig, path)


def render_report(report, out_dir) -> dict:
    """Write every figure a suite report supports; returns their paths."""
    out = Path(out_dir)
    paths = {"metrics": plot_metrics(report.rows, out / "mae.png")}
    if report.histories:
        paths["history"] = plot_history(report.histories, out / "history.png")
    if report.importance is not None:
        paths["importance"] = plot_importance(report.importance, out / "importance.png")
    return paths
