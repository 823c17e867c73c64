"""Adam optimization, joint and hierarchical training schemes, evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import save_nets
from .datapipe import DataError, Dataset, sample_batch, stack_batch
from .losses import BilateralParams, FeatureExtractor, LossConfig, LossWeights, compute_loss, mse
from .metrics import MetricReport, image_metrics
from .network import LapPyrNet
from .pyramid import gaussian_pyramid, gaussian_reduce, laplacian_expand, upsample
from .tensor import Tensor

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss or gradient (exit code 3 in the CLI)."""


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 2
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    scheme: str = "joint"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    crop: Optional[int] = 64
    scale_range: Tuple[float, float] = (0.8, 1.2)
    flip_p: float = 0.5
    checkpoint_every: int = 0
    freeze_lower: bool = False
    clip_grad: Optional[float] = None
    low_band_reg: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if self.scheme not in ("joint", "hierarchical"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def lr_at(step: int, steps: int, lr_start: float, lr_end: float) -> float:
    """Geometric interpolation: ``lr_start`` at 0, ``lr_end`` at ``steps``."""
    if step <= 0:
        return lr_start
    if step >= steps:
        return lr_end
    return lr_start * (lr_end / lr_start) ** (step / steps)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState, lr: float,
              grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    grads = grads if grads is not None else {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in {name}: {bad} of {g.size} entries")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def _joint_params(net_a: LapPyrNet, net_s: LapPyrNet) -> Dict[str, Tensor]:
    params = {f"albedo.{k}": v for k, v in net_a.parameters().items()}
    params.update({f"shading.{k}": v for k, v in net_s.parameters().items()})
    return params


def _low_targets(target: np.ndarray, net: LapPyrNet) -> Tuple[np.ndarray, np.ndarray]:
    """Reference (low band, detail) of ``target`` at the net's split resolution."""
    if net.scale_depth == 0:
        low = upsample(gaussian_reduce(target))
        return low.astype(target.dtype), (target - low).astype(target.dtype)
    pyr = laplacian_expand(target, 1)
    return pyr.levels[1].astype(target.dtype), pyr.levels[0].astype(target.dtype)


def joint_loss(net_a: LapPyrNet, net_s: LapPyrNet, I: np.ndarray, A: np.ndarray, S: np.ndarray,
               loss_cfg: LossConfig, low_band_reg: bool = False):
    """Scheme-"joint" objective for any variant; returns ``(total, parts)``."""
    ra, rs = net_a(I), net_s(I)
    variant = net_a.variant
    if variant == "stacked_split_b":
        # low band gets the full image loss at its level, detail band plain MSE
        a_low, a_det = _low_targets(A, net_a)
        s_low, s_det = _low_targets(S, net_s)
        i_low, _ = _low_targets(I, net_a)
        total, parts = compute_loss(ra.components[1], rs.components[1], a_low, s_low, i_low, loss_cfg)
        detail = mse(ra.components[0], a_det) + mse(rs.components[0], s_det)
        parts["detail"] = detail
        return total + detail, parts
    total, parts = compute_loss(ra.output, rs.output, A, S, I, loss_cfg)
    if variant == "parallel_c" and low_band_reg:
        a_low, _ = _low_targets(A, net_a)
        s_low, _ = _low_targets(S, net_s)
        reg = mse(ra.components[1], a_low) + mse(rs.components[1], s_low)
        parts["low_reg"] = reg
        total = total + reg
    return total, parts


def partial_aggregate(net: LapPyrNet, components: Sequence[Tensor], level: int) -> Tensor:
    """Coarse-to-fine sum of components ``level..K`` at the resolution of ``level``."""
    acc = components[-1]
    for k in range(len(components) - 2, level - 1, -1):
        acc = net.up[k](acc) + components[k]
    return acc


def level_loss(net_a: LapPyrNet, net_s: LapPyrNet, I: np.ndarray, A: np.ndarray, S: np.ndarray,
               level: int, loss_cfg: LossConfig):
    """Hierarchical objective: partial aggregate at ``level`` vs Gaussian targets there."""
    ra, rs = net_a(I), net_s(I)
    K = len(ra.components) - 1
    targets = [gaussian_pyramid(x, K).levels[level].astype(x.dtype) for x in (A, S, I)]
    pa = partial_aggregate(net_a, ra.components, level)
    ps = partial_aggregate(net_s, rs.components, level)
    return compute_loss(pa, ps, targets[0], targets[1], targets[2], loss_cfg)


@dataclass
class TrainResult:
    net_a: LapPyrNet
    net_s: LapPyrNet
    log: List[dict]
    state: AdamState


class _LogWriter:
    COLUMNS = ("step", "stage", "lr", "total", "data", "percep", "tv", "detail", "low_reg", "wall")

    def __init__(self, path: Optional[Path]):
        self.fh = None
        if path is not None:
            self.fh = open(path, "w")
            self.fh.write("\t".join(self.COLUMNS) + "\n")

    def write(self, rec: dict) -> None:
        if self.fh is not None:
            self.fh.write("\t".join(_fmt(rec.get(c, "")) for c in self.COLUMNS) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _run(net_a, net_s, ds, cfg: TrainConfig, objective: Callable, stages: List[Tuple[int, int]],
         out_dir: Optional[Path], extractor: Optional[FeatureExtractor],
         trainable: Callable[[int], Optional[Callable[[str], bool]]]) -> TrainResult:
    if len(ds) == 0:
        raise DataError("training dataset is empty")
    loss_cfg = LossConfig(cfg.weights, cfg.bilateral, extractor)
    rng = np.random.default_rng(cfg.seed)
    params = _joint_params(net_a, net_s)
    state = AdamState()
    multiple = 2 ** net_a.scale_depth
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    writer = _LogWriter(out_dir / "train_log.tsv" if out_dir else None)
    log: List[dict] = []
    t0 = time.perf_counter()
    try:
        step = 0
        for stage, n_steps in stages:
            keep = trainable(stage)
            for _ in range(n_steps):
                lr = lr_at(step, cfg.steps, cfg.lr_start, cfg.lr_end)
                batch = sample_batch(ds, rng, cfg.batch, cfg.crop, cfg.scale_range, cfg.flip_p, multiple)
                I, A, S = stack_batch(batch, net_a.dtype)
                total, parts = objective(I, A, S, stage, loss_cfg)
                if not np.isfinite(total.data):
                    raise NumericalError(f"non-finite loss at step {step}")
                T.zero_grad(params.values())
                total.backward()
                grads = {k: p.grad for k, p in params.items()
                         if p.grad is not None and (keep is None or keep(k))}
                if cfg.clip_grad is not None:
                    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                    if np.isfinite(norm) and norm > cfg.clip_grad:
                        grads = {k: g * (cfg.clip_grad / norm) for k, g in grads.items()}
                adam_step(params, state, lr, grads)
                rec = {"step": step, "stage": stage, "lr": lr, "total": float(total.data),
                       "wall": round(time.perf_counter() - t0, 3)}
                rec.update({k: float(v.data) for k, v in parts.items()})
                log.append(rec)
                if step % cfg.log_every == 0:
                    writer.write(rec)
                step += 1
                if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_nets(out_dir / f"step{step:06d}.ckpt", net_a, net_s, {"step": step})
        if out_dir is not None:
            save_nets(out_dir / "final.ckpt", net_a, net_s, {"step": step})
    finally:
        writer.close()
    T.zero_grad(params.values())
    return TrainResult(net_a, net_s, log, state)


def train_joint(net_a: LapPyrNet, net_s: LapPyrNet, train_ds: Dataset, cfg: TrainConfig,
                out_dir=None, extractor: Optional[FeatureExtractor] = None) -> TrainResult:
    """Single objective on the full-resolution aggregate (plus variant extras)."""

    def objective(I, A, S, stage, loss_cfg):
        return joint_loss(net_a, net_s, I, A, S, loss_cfg, cfg.low_band_reg)

    return _run(net_a, net_s, train_ds, cfg, objective, [(0, cfg.steps)], out_dir, extractor, lambda s: None)


def hierarchical_stages(K: int, steps: int) -> List[Tuple[int, int]]:
    """``(level, n_steps)`` from the low band ``K`` down to ``0``; steps split evenly."""
    n = K + 1
    base, extra = divmod(steps, n)
    return [(K - i, base + (1 if i < extra else 0)) for i in range(n)]


def train_hierarchical(net_a: LapPyrNet, net_s: LapPyrNet, train_ds: Dataset, cfg: TrainConfig,
                       out_dir=None, extractor: Optional[FeatureExtractor] = None) -> TrainResult:
    """Left-to-right training: stage ``k`` fits the partial aggregate at Gaussian level ``k``."""
    if net_a.variant != "pyramid_d" or net_s.variant != "pyramid_d":
        raise ValueError("hierarchical training requires the pyramid_d variant")
    K = net_a.K

    def objective(I, A, S, level, loss_cfg):
        return level_loss(net_a, net_s, I, A, S, level, loss_cfg)

    def trainable(level):
        if not cfg.freeze_lower:
            return None
        block = f"L{K}." if level == K else f"H{level}."

        def keep(name: str) -> bool:
            local = name.split(".", 1)[1]
            return local.startswith(block) or local.startswith(f"up{level}.") or local.startswith(f"down{level - 1}.")

        return keep

    return _run(net_a, net_s, train_ds, cfg, objective, hierarchical_stages(K, cfg.steps),
                out_dir, extractor, trainable)


def train(net_a, net_s, train_ds, cfg: TrainConfig, out_dir=None, extractor=None) -> TrainResult:
    fn = train_hierarchical if cfg.scheme == "hierarchical" else train_joint
    return fn(net_a, net_s, train_ds, cfg, out_dir, extractor)


# ------------------------------------------------------------------ evaluation


def evaluate_predictions(predict: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]], test_ds: Dataset,
                         window: Optional[int] = None) -> MetricReport:
    if len(test_ds) == 0:
        raise DataError("test dataset is empty")
    report = MetricReport()
    for pair in test_ds:
        a_pred, s_pred = predict(pair.input)
        report.add(pair.id, image_metrics(a_pred, pair.albedo, s_pred, pair.shading, window))
    return report


def evaluate(net_a: LapPyrNet, net_s: LapPyrNet, test_ds: Dataset, window: Optional[int] = None) -> MetricReport:
    from .network import decompose

    return evaluate_predictions(lambda img: decompose(net_a, net_s, img), test_ds, window)


def constant_shading_baseline(img: np.ndarray):
    return img, np.ones_like(img)


def constant_albedo_baseline(img: np.ndarray):
    return np.ones_like(img), img
