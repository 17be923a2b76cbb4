"""Figure rendering for the report commands. Every function writes one image file."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PHASE_COLOURS = {
    "joint": "0.85",
    "backbone_fixed_equal": "#fde0c5",
    "backbone": "#d6e6f5",
    "awm": "#e3f1d8",
}


def _figure(width=6.0, height=None):
    height = height or width * 0.62
    fig, ax = plt.subplots(figsize=(width, height))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(records: list[dict], path, title: str | None = None):
    """Test error and training loss per epoch, with the training phase shaded."""
    fig, ax = _figure()
    epochs = [r["epoch"] for r in records]
    for r in records:
        ax.axvspan(r["epoch"] - 0.5, r["epoch"] + 0.5, color=PHASE_COLOURS.get(r["phase"], "w"), lw=0)
    if any(r.get("test_err") is not None for r in records):
        ax.plot(epochs, [100 * (r["test_err"] if r["test_err"] is not None else np.nan) for r in records],
                "k-", label="test error (%)")
    ax.plot(epochs, [100 * (1 - r["train_acc"]) for r in records], "k--", label="train error (%)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("error (%)")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["train_loss"] for r in records], color="tab:red", lw=1, label="train loss")
    ax2.set_ylabel("loss", color="tab:red")
    ax.legend(loc="upper right", frameon=False, fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_t_sweep(rows: list[dict], path):
    """Final test error against the alternation period, mean and spread over seeds."""
    by_t = defaultdict(list)
    for r in rows:
        by_t[int(r["t"])].append(100 * float(r["final_test_err"]))
    ts = sorted(by_t)
    means = [np.mean(by_t[t]) for t in ts]
    spread = [np.std(by_t[t]) for t in ts]
    fig, ax = _figure(5.0)
    ax.errorbar(ts, means, yerr=spread, fmt="o-", color="k", capsize=3)
    ax.set_xticks(ts)
    ax.set_xlabel("alternation period t (epochs)")
    ax.set_ylabel("final test error (%)")
    return _save(fig, path)


def plot_unit_weights(stats: list[dict], path, classes=None):
    """Per-unit mean λ₁ with variance bars, overall and for selected classes."""
    fig, ax = _figure(7.0, 3.5)
    groups = defaultdict(list)
    for r in stats:
        groups[r["class"]].append(r)
    keys = ["all"] + [k for k in groups if k != "all" and (classes is None or k in classes)]
    for i, key in enumerate(keys):
        rows = sorted(groups[key], key=lambda r: r["unit"])
        units = np.array([r["unit"] for r in rows]) + 1
        mean = np.array([r["mean"] for r in rows])
        var = np.array([r["var"] for r in rows])
        style = dict(color="k", lw=2) if key == "all" else dict(lw=0.8, alpha=0.7)
        ax.plot(units, mean, label=str(key), **style)
        if key == "all":
            ax.errorbar(units, mean, yerr=var, fmt="none", ecolor="0.4", capsize=2)
    ax.axhline(0.5, color="0.5", ls=":", lw=1)
    ax.set_xlabel("mapping unit")
    ax.set_ylabel("λ₁")
    ax.set_ylim(0, 1)
    if len(keys) > 1:
        ax.legend(ncol=min(len(keys), 6), fontsize=7, frameon=False)
    return _save(fig, path)


def plot_cmc(curves: dict[str, np.ndarray], path, max_rank: int | None = None):
    """Rank-k accuracy curves, one line per feature type."""
    fig, ax = _figure(5.0)
    for name, curve in curves.items():
        curve = np.asarray(curve)
        k = np.arange(1, len(curve) + 1)
        if max_rank:
            k, curve = k[:max_rank], curve[:max_rank]
        ax.plot(k, 100 * curve, marker="o", ms=3, label=name)
    ax.set_xlabel("rank k")
    ax.set_ylabel("rank-k accuracy (%)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_image_strip(images: np.ndarray, path, title: str | None = None):
    """A row of uint8 3x32x32 images."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(1.1 * n, 1.4))
    axes = np.atleast_1d(axes)
    for ax, img in zip(axes, images):
        ax.imshow(np.transpose(img, (1, 2, 0)))
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)
