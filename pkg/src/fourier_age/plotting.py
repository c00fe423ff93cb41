"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(epoch_losses, val_mae, path, baseline: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = np.arange(1, len(epoch_losses) + 1)
        ax.plot(epochs, epoch_losses, "o-", label="train loss")
        if len(val_mae):
            ax.plot(epochs, val_mae, "s-", label="val MAE (years)")
        if baseline is not None:
            ax.axhline(baseline, ls="--", c="gray", label="mean-age predictor")
        ax.set_xlabel("epoch")
        ax.legend()
        return _save(fig, path)


def plot_benchmark(result, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog(result.tokens, result.fourier_times, "o-",
                  label=f"Fourier mixer (slope {result.fourier_slope:.2f})")
        ax.loglog(result.tokens, result.attention_times, "s-",
                  label=f"attention (slope {result.attention_slope:.2f})")
        ax.set_xlabel("tokens")
        ax.set_ylabel("median forward time (s)")
        ax.legend()
        return _save(fig, path)


def plot_predictions(predictions, labels, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(labels, predictions, s=6, alpha=0.6)
        lo, hi = float(np.min(labels)), float(np.max(labels))
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("true age")
        ax.set_ylabel("predicted age")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_correction_traces(results, path, limit: int = 50) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for res in results[:limit]:
            its = [t[0] for t in res.trace]
            ax.plot(its, res.selected_errors, "-", lw=0.7, alpha=0.6)
        ax.set_xlabel("iteration")
        ax.set_ylabel("estimated error of incumbent")
        return _save(fig, path)
