"""Evaluation metrics for albedo/shading predictions.

Images are ``[C,H,W]`` arrays (``[H,W]`` is accepted as a single channel).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

logger = logging.getLogger(__name__)

FIELDS = ("si_mse_A", "si_mse_S", "si_lmse_A", "si_lmse_S", "dssim_A", "dssim_S", "lmse")


class MetricError(ValueError):
    pass


def _f64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def optimal_scale(pred, gt) -> float:
    """Least-squares ``alpha`` minimizing ``||alpha*pred - gt||^2`` over all channels.

    An all-zero prediction gets ``alpha = 0``.
    """
    p, g = _f64(pred), _f64(gt)
    denom = float(np.sum(p * p))
    if denom == 0.0:
        return 0.0
    return float(np.sum(p * g)) / denom


def si_mse(pred, gt) -> float:
    p, g = _f64(pred), _f64(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    alpha = optimal_scale(p, g)
    return float(np.mean((alpha * p - g) ** 2))


def window_starts(n: int, window: int, stride: int) -> List[int]:
    """Stride-spaced starts plus a final window anchored at the far edge."""
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def default_window(h: int, w: int) -> int:
    return max(2, int(round(0.1 * max(h, w))))


def si_lmse(pred, gt, window: Optional[int] = None, stride: Optional[int] = None) -> float:
    """Mean si-MSE over sliding ``window x window`` patches."""
    p, g = _f64(pred), _f64(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    h, w = p.shape[-2:]
    window = default_window(h, w) if window is None else window
    if window <= 0:
        raise MetricError("window must be positive")
    if window > min(h, w):
        raise MetricError(f"window {window} exceeds image extents {h}x{w}")
    stride = max(1, window // 2) if stride is None else stride
    if stride <= 0:
        raise MetricError("stride must be positive")
    vals = [
        si_mse(p[..., i : i + window, j : j + window], g[..., i : i + window, j : j + window])
        for i in window_starts(h, window, stride)
        for j in window_starts(w, window, stride)
    ]
    return float(np.mean(vals))


def lmse(a_pred, a_gt, s_pred, s_gt, window: int = 20, stride: Optional[int] = None) -> float:
    """Normalized local error: each term divided by the zero-prediction error, halved, summed.

    The window is clipped to the image extents.
    """
    out = 0.0
    for pred, gt in ((s_pred, s_gt), (a_pred, a_gt)):
        g = _f64(gt)
        if not np.any(g):
            raise MetricError("LMSE undefined for an all-zero ground truth")
        win = min(window, *g.shape[-2:])
        st = max(1, win // 2) if stride is None else stride
        denom = si_lmse(np.zeros_like(g), g, win, st)
        out += 0.5 * si_lmse(pred, g, win, st) / denom
    return out


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    t = np.exp(-(x**2) / (2 * sigma**2))
    return t / t.sum()


def _luma(img: np.ndarray) -> np.ndarray:
    img = _f64(img)
    if img.shape[0] == 3:
        return np.tensordot(np.array([0.299, 0.587, 0.114]), img, axes=([0], [0]))
    if img.shape[0] == 1:
        return img[0]
    raise MetricError(f"expected 1 or 3 channels, got {img.shape[0]}")


def ssim(pred, gt, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM of luminance over all fully-contained Gaussian windows."""
    x, y = _luma(pred), _luma(gt)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < size:
        raise MetricError(f"extents {x.shape} smaller than the {size}x{size} SSIM window")
    for name, img in (("pred", x), ("gt", y)):
        if img.min() < 0 or img.max() > 1:
            logger.warning("%s outside [0, 1]; clamping for SSIM", name)
    x, y = np.clip(x, 0, 1), np.clip(y, 0, 1)
    win = gaussian_window(size, sigma)
    r = size // 2

    def filt(img):
        out = correlate1d(correlate1d(img, win, axis=0), win, axis=1)
        return out[r : img.shape[0] - r, r : img.shape[1] - r]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(np.mean(smap))


def dssim(pred, gt, **kw) -> float:
    val = (1.0 - ssim(pred, gt, **kw)) / 2.0
    return float(min(1.0, max(0.0, val)))


def image_metrics(a_pred, a_gt, s_pred, s_gt, window: Optional[int] = None) -> Dict[str, float]:
    return {
        "si_mse_A": si_mse(a_pred, a_gt),
        "si_mse_S": si_mse(s_pred, s_gt),
        "si_lmse_A": si_lmse(a_pred, a_gt, window),
        "si_lmse_S": si_lmse(s_pred, s_gt, window),
        "dssim_A": dssim(a_pred, a_gt),
        "dssim_S": dssim(s_pred, s_gt),
        "lmse": lmse(a_pred, a_gt, s_pred, s_gt),
    }


@dataclass
class MetricReport:
    per_image: List[Dict[str, float]] = field(default_factory=list)
    ids: List[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_image)

    @property
    def aggregate(self) -> Dict[str, float]:
        if not self.per_image:
            return {k: math.nan for k in FIELDS}
        agg = {k: float(np.mean([row[k] for row in self.per_image])) for k in FIELDS}
        agg["si_mse_avg"] = 0.5 * (agg["si_mse_A"] + agg["si_mse_S"])
        agg["si_lmse_avg"] = 0.5 * (agg["si_lmse_A"] + agg["si_lmse_S"])
        agg["dssim_avg"] = 0.5 * (agg["dssim_A"] + agg["dssim_S"])
        return agg

    def add(self, image_id: str, row: Dict[str, float]) -> None:
        self.ids.append(image_id)
        self.per_image.append({k: float(row[k]) for k in FIELDS})

    def to_records(self) -> List[dict]:
        recs = [{"kind": "image", "id": i, **row} for i, row in zip(self.ids, self.per_image)]
        recs.append({"kind": "aggregate", "id": "*", "count": self.count, **self.aggregate})
        return recs

    def to_table(self) -> str:
        """Tab-separated table: header, one row per image, final ``*`` aggregate row."""
        lines = ["\t".join(("id",) + FIELDS)]
        for i, row in zip(self.ids, self.per_image):
            lines.append("\t".join([i] + [f"{row[k]:.8g}" for k in FIELDS]))
        agg = self.aggregate
        lines.append("\t".join(["*"] + [f"{agg[k]:.8g}" for k in FIELDS]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"schema": "lappyr.metric_report/1", "records": self.to_records()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        rep = cls()
        for rec in json.loads(text)["records"]:
            if rec["kind"] == "image":
                rep.add(rec["id"], rec)
        return rep

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricReport) and self.ids == other.ids and self.per_image == other.per_image
