"""Report figures written next to the CLI's tabular output (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import FIELDS, MetricReport  # noqa: E402


def _hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.transpose(1, 2, 0)
        if img.shape[2] == 1:
            img = img[..., 0]
    return img


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(log: Sequence[Dict[str, float]], path, keys=("total", "data", "percep", "tv")) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in log]
    for k in keys:
        vals = [r.get(k) for r in log]
        if all(v is not None for v in vals) and vals:
            ax.semilogy(steps, np.maximum(vals, 1e-12), label=k)
    stages = sorted({r.get("stage", 0) for r in log})
    if len(stages) > 1:
        for s in stages[1:]:
            first = next(r["step"] for r in log if r.get("stage") == s)
            ax.axvline(first, color="grey", lw=0.5, ls="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(report: MetricReport, path, baselines: Dict[str, MetricReport] | None = None) -> Path:
    """Grouped bars of the aggregate metrics, optionally against baseline reports."""
    rows = {"model": report.aggregate}
    for name, rep in (baselines or {}).items():
        rows[name] = rep.aggregate
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / len(rows)
    x = np.arange(len(FIELDS))
    for i, (name, agg) in enumerate(rows.items()):
        ax.bar(x + i * width, [agg[k] for k in FIELDS], width, label=name)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(FIELDS, rotation=30, ha="right")
    ax.set_title(f"aggregate over {report.count} images")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def pyramid_montage(levels: List[np.ndarray], path, title: str = "") -> Path:
    """Detail levels (offset to mid-grey) followed by the low band."""
    fig, axes = plt.subplots(1, len(levels), figsize=(2.5 * len(levels), 2.8))
    axes = np.atleast_1d(axes)
    for k, (ax, lv) in enumerate(zip(axes, levels)):
        shown = lv if k == len(levels) - 1 else lv + 0.5
        ax.imshow(np.clip(_hwc(shown), 0, 1), cmap="gray", interpolation="nearest")
        ax.set_title(f"L{k}" if k < len(levels) - 1 else f"low {k}")
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def decomposition_figure(image: np.ndarray, albedo: np.ndarray, shading: np.ndarray, path,
                         truth: tuple | None = None) -> Path:
    panels = [("input", image), ("albedo", albedo), ("shading", shading)]
    if truth is not None:
        panels += [("albedo (gt)", truth[0]), ("shading (gt)", truth[1])]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.5 * len(panels), 2.8))
    for ax, (name, img) in zip(axes, panels):
        ax.imshow(np.clip(_hwc(img), 0, 1), interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)
