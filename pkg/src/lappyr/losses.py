"""Training losses: joint-bilateral data term, feature (perceptual) term, TV.

Predictions are :class:`~lappyr.tensor.Tensor` objects; targets and the input
image are plain arrays treated as constants. All images are ``[N,C,H,W]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_p: float = 0.5
    lambda_t: float = 1e-4

    def __post_init__(self):
        if min(self.lambda_d, self.lambda_p, self.lambda_t) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class BilateralParams:
    """``sigma_r=None`` selects the adaptive range width."""

    sigma_s: float = 1.0
    sigma_r: Optional[float] = None
    window: int = 5
    range_mode: str = "luminance"  # or "per_channel"

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"bilateral window must be odd and positive, got {self.window}")
        if self.sigma_s <= 0:
            raise ValueError(f"sigma_s must be > 0, got {self.sigma_s}")
        if self.range_mode not in ("luminance", "per_channel"):
            raise ValueError(f"unknown range mode {self.range_mode!r}")


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma over the channel axis of ``[N,C,H,W]`` (keeps a size-1 axis)."""
    img = np.asarray(img)
    if img.shape[1] == 1:
        return img
    if img.shape[1] != 3:
        raise ValueError(f"luminance needs 1 or 3 channels, got {img.shape[1]}")
    return np.tensordot(LUMA.astype(img.dtype), img, axes=([0], [1]))[:, None]


def adaptive_sigma_r(guide: np.ndarray) -> np.ndarray:
    """Per-image range width ``max(0.05, std(luminance))``."""
    lum = luminance(guide)
    return np.maximum(0.05, lum.reshape(lum.shape[0], -1).std(axis=1))


def bilateral_weights(guide: np.ndarray, params: BilateralParams) -> np.ndarray:
    """Normalized weights ``[N, Cw, window^2, H, W]`` for :func:`tensor.window_filter`."""
    guide = np.asarray(guide, dtype=np.float64)
    rng_img = luminance(guide) if params.range_mode == "luminance" else guide
    n, cw, h, w = rng_img.shape
    win = params.window
    r = win // 2
    if params.sigma_r is None:
        sig_r = adaptive_sigma_r(guide)
    else:
        sig_r = np.full(n, float(params.sigma_r))
    gp = T.pad_reflect(rng_img, r, r)
    wts = np.empty((n, cw, win * win, h, w))
    for o in range(win * win):
        i, j = divmod(o, win)
        spatial = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2.0 * params.sigma_s**2))
        diff = gp[:, :, i : i + h, j : j + w] - rng_img
        with np.errstate(divide="ignore", invalid="ignore"):
            rng_w = np.exp(-(diff**2) / (2.0 * sig_r[:, None, None, None] ** 2))
        rng_w = np.where(np.isinf(sig_r)[:, None, None, None], 1.0, rng_w)
        wts[:, :, o] = spatial * rng_w
    wts /= wts.sum(axis=2, keepdims=True)
    return wts


def joint_bilateral_filter(pred, guide: np.ndarray, params: BilateralParams = BilateralParams()) -> Tensor:
    """Filter ``pred`` with weights from ``guide`` (guide is a constant)."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    guide = np.asarray(guide)
    if pred.shape != guide.shape:
        raise T.ShapeError(f"pred {pred.shape} and guide {guide.shape} differ")
    wts = bilateral_weights(guide, params).astype(pred.dtype)
    return T.window_filter(pred, wts, params.window)


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def mse(pred: Tensor, target) -> Tensor:
    return T.mean(T.square(pred - _const(target, pred)))


def reconstruction_loss(a_pred: Tensor, s_pred: Tensor, image) -> Tensor:
    return mse(a_pred * s_pred, image)


def data_loss(a_pred: Tensor, s_pred: Tensor, albedo, shading, image,
              params: BilateralParams = BilateralParams()) -> Tensor:
    """Bilateral fit of both predictions plus the product-reconstruction term."""
    shapes = {a_pred.shape, s_pred.shape, np.shape(albedo), np.shape(shading), np.shape(image)}
    if len(shapes) != 1:
        raise T.ShapeError(f"data_loss inputs must share one shape, got {sorted(shapes)}")
    total = reconstruction_loss(a_pred, s_pred, image)
    for pred, target in ((a_pred, albedo), (s_pred, shading)):
        total = total + mse(joint_bilateral_filter(pred, target, params), target)
    return total


class FeatureExtractor:
    """Fixed conv/ReLU/avg-pool stack with four activation taps.

    Each stage is two 3x3 convolutions followed by ReLU; the tap is taken
    after the stage, and stages after the first are preceded by 2x pooling.
    """

    def __init__(self, stages: Sequence[Sequence[Tuple[np.ndarray, np.ndarray]]]):
        if len(stages) != 4:
            raise ValueError(f"expected 4 stages, got {len(stages)}")
        self.stages = [[(np.asarray(w), np.asarray(b)) for w, b in st] for st in stages]

    @classmethod
    def surrogate(cls, seed: int = 1234, widths=(8, 16, 32, 32), in_channels: int = 3) -> "FeatureExtractor":
        rng = T.make_rng(seed)
        stages, ci = [], in_channels
        for co in widths:
            layers = []
            for cin in (ci, co):
                w = rng.standard_normal((co, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
                layers.append((w, np.zeros(co)))
            stages.append(layers)
            ci = co
        return cls(stages)

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        """Load weights stored as ``stage{s}.conv{i}.weight`` / ``.bias`` tensors."""
        from .checkpoint import read_tensors

        _, tensors = read_tensors(path)
        stages = []
        for s in range(4):
            layers, i = [], 0
            while f"stage{s}.conv{i}.weight" in tensors:
                layers.append((tensors[f"stage{s}.conv{i}.weight"], tensors[f"stage{s}.conv{i}.bias"]))
                i += 1
            if not layers:
                raise ValueError(f"extractor file {path} has no layers for stage {s}")
            stages.append(layers)
        return cls(stages)

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for s, st in enumerate(self.stages):
            for i, (w, b) in enumerate(st):
                out[f"stage{s}.conv{i}.weight"] = w
                out[f"stage{s}.conv{i}.bias"] = b
        return out

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.stages) - 1)

    @property
    def min_extent(self) -> int:
        # the coarsest stage still needs 2 pixels for reflect padding
        return 2 * self.multiple

    def accepts(self, h: int, w: int) -> bool:
        return min(h, w) >= self.min_extent and h % self.multiple == 0 and w % self.multiple == 0

    def tap_shapes(self, h: int, w: int) -> List[Tuple[int, int, int]]:
        return [(st[-1][0].shape[0], h >> s, w >> s) for s, st in enumerate(self.stages)]

    def __call__(self, x: Tensor) -> List[Tensor]:
        h, w = x.shape[2:]
        if not self.accepts(h, w):
            raise T.ShapeError(
                f"extents {h}x{w} too small for 4 taps (need multiples of {self.multiple}, at least {self.min_extent})"
            )
        taps = []
        for s, stage in enumerate(self.stages):
            if s > 0:
                x = T.avg_pool2(x)
            for wt, b in stage:
                x = T.relu(T.conv2d(x, Tensor(wt.astype(x.dtype)), Tensor(b.astype(x.dtype)), ConvSpec()))
            taps.append(x)
        return taps


_DEFAULT_EXTRACTOR: Optional[FeatureExtractor] = None


def default_extractor() -> FeatureExtractor:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = FeatureExtractor.surrogate()
    return _DEFAULT_EXTRACTOR


def perceptual_loss(a_pred: Tensor, s_pred: Tensor, albedo, shading,
                    fx: Optional[FeatureExtractor] = None) -> Tensor:
    fx = fx or default_extractor()
    total = None
    for pred, target in ((a_pred, albedo), (s_pred, shading)):
        feats_p = fx(pred)
        feats_t = fx(Tensor(np.asarray(target, dtype=pred.dtype)))
        for fp, ft in zip(feats_p, feats_t):
            # mean over N*F*H*W == per-image 1/(F H W) normalization, averaged over the batch
            term = mse(fp, ft.data)
            total = term if total is None else total + term
    return total


def tv_loss(a_pred: Tensor, s_pred: Tensor, reduction: str = "sum") -> Tensor:
    """Anisotropic L1 total variation over both predictions.

    ``reduction="mean"`` divides by the number of prediction elements, which
    puts the term on the same per-element scale as the data loss.
    """
    total = None
    for c in (a_pred, s_pred):
        dv = c[:, :, 1:, :] - c[:, :, :-1, :]
        dh = c[:, :, :, 1:] - c[:, :, :, :-1]
        term = T.tsum(T.absolute(dv)) + T.tsum(T.absolute(dh))
        total = term if total is None else total + term
    if reduction == "mean":
        return total * (1.0 / a_pred.size)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def total_loss(parts: Dict[str, Tensor], w: LossWeights = LossWeights()) -> Tensor:
    """``lambda_d * data + lambda_p * percep + lambda_t * tv`` (missing parts count as 0)."""
    out = None
    for key, lam in (("data", w.lambda_d), ("percep", w.lambda_p), ("tv", w.lambda_t)):
        part = parts.get(key)
        if part is None:
            continue
        part = part if isinstance(part, Tensor) else Tensor(float(part))
        term = part * lam
        out = term if out is None else out + term
    return out if out is not None else Tensor(0.0)


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    extractor: Optional[FeatureExtractor] = None
    tv_reduction: str = "mean"


def compute_loss(a_pred: Tensor, s_pred: Tensor, albedo, shading, image,
                 cfg: Optional[LossConfig] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Total loss and its parts for one prediction pair.

    The perceptual term is skipped when its weight is zero or the extents are
    too small for the extractor.
    """
    cfg = cfg or LossConfig()
    w = cfg.weights
    parts: Dict[str, Tensor] = {}
    parts["data"] = data_loss(a_pred, s_pred, albedo, shading, image, cfg.bilateral)
    if w.lambda_p > 0:
        fx = cfg.extractor or default_extractor()
        if fx.accepts(*a_pred.shape[2:]):
            parts["percep"] = perceptual_loss(a_pred, s_pred, albedo, shading, fx)
    if w.lambda_t > 0:
        parts["tv"] = tv_loss(a_pred, s_pred, cfg.tv_reduction)
    return total_loss(parts, w), parts
