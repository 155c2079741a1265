"""Raster figures for evaluation reports and the case study (matplotlib, Agg)."""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..tensorio import atomic_write_bytes  # noqa: E402


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def _voiced(f0: np.ndarray) -> np.ndarray:
    f0 = np.asarray(f0, dtype=float)
    return np.where(f0 > 0, f0, np.nan)


def comparison_figure(pred_mel, gt_mel, pred_f0, gt_f0, path, title: str = "") -> Path:
    fig, axes = plt.subplots(3, 1, figsize=(8, 7.5))
    for ax, mel, name in ((axes[0], gt_mel, "ground truth"), (axes[1], pred_mel, "predicted")):
        ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", interpolation="nearest")
        ax.set_ylabel("mel bin")
        ax.set_title(name)
    axes[2].plot(_voiced(gt_f0), label="ground truth")
    axes[2].plot(_voiced(pred_f0), label="predicted")
    axes[2].set_xlabel("frame")
    axes[2].set_ylabel("F0 (Hz)")
    axes[2].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def case_study_figure(mels: dict, f0s: dict, path, title: str = "") -> Path:
    n = len(mels)
    fig, axes = plt.subplots(n + 1, 1, figsize=(8, 2.4 * (n + 1)))
    for ax, (mode, mel) in zip(axes, mels.items()):
        ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", interpolation="nearest")
        ax.set_title(f"{mode} context")
        ax.set_ylabel("mel bin")
    for mode, f0 in f0s.items():
        axes[-1].plot(_voiced(f0), label=mode)
    axes[-1].set_xlabel("frame")
    axes[-1].set_ylabel("F0 (Hz)")
    axes[-1].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def metric_summary_figure(per_utterance: dict, path) -> Path:
    names = ("f0_rmse", "energy_rmse", "duration_mse", "mcd")
    fig, axes = plt.subplots(1, len(names), figsize=(12, 3))
    for ax, name in zip(axes, names):
        ax.hist([r[name] for r in per_utterance.values()], bins=10)
        ax.set_title(name)
    fig.tight_layout()
    return _save(fig, path)
