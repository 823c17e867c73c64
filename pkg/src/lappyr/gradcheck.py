"""Central finite-difference checks of every differentiable operation.

The numeric side only ever evaluates forward values, so it is independent of
the backward closures it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import losses as Lf
from . import tensor as T
from .network import NetConfig, build_pair
from .tensor import ConvSpec, Tensor

OP_TOL = 1e-4
LOSS_TOL = 1e-3
EPS = 1e-4
FLOOR = 1e-8
SCALE_FLOOR = 1e-6  # entries below this fraction of the tensor's largest gradient count as zero
KINK_EPS = 1e-6
KINK_RATIO = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    n_checked: int
    n_kinks: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR, scale: Optional[float] = None) -> float:
    """Max elementwise relative error.

    The denominator is floored at ``SCALE_FLOOR * scale`` (``scale`` defaults to
    the largest analytic magnitude) so exact zeros compared against round-off
    of a large objective do not register as 100% errors.
    """
    a, n = np.asarray(analytic, float).ravel(), np.asarray(numeric, float).ravel()
    if scale is None:
        scale = float(np.max(np.abs(a))) if a.size else 0.0
    floor = max(floor, SCALE_FLOOR * scale)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = EPS,
                 indices: Optional[Sequence[tuple]] = None, kink_guard: bool = True):
    """Central differences of scalar ``fn`` w.r.t. ``arr`` (perturbed in place).

    Returns ``(grad, n_kinks)``. With ``kink_guard`` each estimate is compared
    with the one at ``eps/2``; for smooth functions they agree to O(eps^2),
    so a disagreement means a ReLU / abs kink lies inside ``[x - eps, x + eps]``
    and the entry is re-measured with ``KINK_EPS``.
    """
    idx = list(np.ndindex(arr.shape)) if indices is None else list(indices)
    out = np.empty(len(idx))
    kinks = 0

    def central(i, h):
        old = arr[i]
        arr[i] = old + h
        fp = fn()
        arr[i] = old - h
        fm = fn()
        arr[i] = old
        return (fp - fm) / (2 * h), max(abs(fp), abs(fm))

    for k, i in enumerate(idx):
        g, fmag = central(i, eps)
        if kink_guard:
            g_half, _ = central(i, eps / 2)
            noise = 1e-13 * max(fmag, 1.0) / eps
            if abs(g - g_half) > max(KINK_RATIO * abs(g), noise):
                kinks += 1
                g, _ = central(i, KINK_EPS)
        out[k] = g
    return out, kinks


def check(name: str, build: Callable[[List[Tensor]], Tensor], inputs: Sequence[np.ndarray],
          tol: float = OP_TOL, eps: float = EPS, max_entries: Optional[int] = None,
          rng: Optional[np.random.Generator] = None) -> CheckResult:
    """Compare backprop gradients of ``build(tensors)`` with finite differences.

    ``build`` receives one leaf tensor per input and must return a scalar.
    With ``max_entries`` only that many randomly chosen entries per input are
    checked.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build(leaves).backward()
    worst, count, kinks = 0.0, 0, 0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        indices = None
        if max_entries is not None and arr.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(arr.size, size=max_entries, replace=False)
            indices = [np.unravel_index(f, arr.shape) for f in flat]

        def fn():
            return float(build([Tensor(a) for a in arrays]).data)

        numeric, nk = numeric_grad(fn, arr, eps, indices)
        kinks += nk
        picked = analytic.ravel() if indices is None else np.array([analytic[i] for i in indices])
        worst = max(worst, rel_error(picked, numeric, scale=float(np.max(np.abs(analytic)))))
        count += numeric.size
    return CheckResult(name, worst, tol, count, kinks)


def _spec(k, stride=1, mode="reflect", padding=None):
    return ConvSpec((k, k), stride, mode, padding=padding)


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    res = []
    # random projection keeps gradients dense for ops whose output is not scalar
    proj = {}

    def dot(y: Tensor) -> Tensor:
        if y.shape not in proj:
            proj[y.shape] = np.random.default_rng(seed + 1).standard_normal(y.shape)
        return T.tsum(y * Tensor(proj[y.shape]))

    res.append(check("conv2d/reflect", lambda t: dot(T.conv2d(t[0], t[1], t[2], _spec(3))),
                     [r(2, 3, 6, 5), r(4, 3, 3, 3), r(4)]))
    res.append(check("conv2d/zero", lambda t: dot(T.conv2d(t[0], t[1], t[2], _spec(3, mode="zero"))),
                     [r(1, 2, 5, 6), r(3, 2, 3, 3), r(3)]))
    res.append(check("conv2d/stride2", lambda t: dot(T.conv2d(t[0], t[1], t[2], _spec(5, 2))),
                     [r(1, 3, 8, 8), r(3, 3, 5, 5), r(3)]))
    res.append(check("conv2d/1x1", lambda t: dot(T.conv2d(t[0], t[1], t[2], _spec(1))),
                     [r(1, 3, 4, 4), r(5, 3, 1, 1), r(5)]))
    res.append(check("conv2d_transpose", lambda t: dot(T.conv2d_transpose(t[0], t[1], _spec(4, 2, padding=(1, 1)))),
                     [r(2, 3, 4, 3), r(3, 2, 4, 4)]))
    res.append(check("conv2d_transpose/zero",
                     lambda t: dot(T.conv2d_transpose(t[0], t[1], _spec(4, 2, "zero", padding=(1, 1)))),
                     [r(1, 2, 3, 3), r(2, 2, 4, 4)]))
    res.append(check("elu", lambda t: dot(T.elu(t[0])), [r(3, 4, 5)]))
    res.append(check("relu", lambda t: dot(T.relu(t[0])), [r(3, 4, 5)]))
    res.append(check("add", lambda t: dot(t[0] + t[1]), [r(2, 3), r(2, 3)]))
    res.append(check("sub", lambda t: dot(t[0] - t[1]), [r(2, 3), r(2, 3)]))
    res.append(check("mul", lambda t: dot(t[0] * t[1]), [r(2, 3, 4), r(2, 3, 4)]))
    res.append(check("scale", lambda t: dot(t[0] * 2.5), [r(2, 3)]))
    res.append(check("square", lambda t: dot(T.square(t[0])), [r(2, 3)]))
    res.append(check("abs", lambda t: dot(T.absolute(t[0])), [r(2, 3) + 0.5 * np.sign(r(2, 3))]))
    res.append(check("sum", lambda t: T.tsum(t[0] * t[0]), [r(3, 4)]))
    res.append(check("mean", lambda t: T.mean(t[0] * t[0]), [r(3, 4)]))
    res.append(check("slice", lambda t: dot(t[0][:, :, 1:, :-1]), [r(1, 2, 4, 4)]))
    res.append(check("avg_pool2", lambda t: dot(T.avg_pool2(t[0])), [r(1, 2, 4, 6)]))
    guide = rng.random((1, 3, 6, 6))
    wts = Lf.bilateral_weights(guide, Lf.BilateralParams())
    res.append(check("window_filter", lambda t: dot(T.window_filter(t[0], wts, 5)), [r(1, 3, 6, 6)]))
    return res


def _images(rng, shape):
    return [rng.uniform(0.1, 0.9, shape) for _ in range(3)]


def loss_checks(seed: int = 0, size: int = 16) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    shape = (1, 3, size, size)
    A, S, _ = _images(rng, shape)
    I = A * S + 0.01 * rng.standard_normal(shape)
    a0, s0 = rng.uniform(0.1, 0.9, shape), rng.uniform(0.1, 0.9, shape)
    bp = Lf.BilateralParams()
    fx = Lf.FeatureExtractor.surrogate(seed=7)
    res = [
        check("joint_bilateral_filter", lambda t: T.mean(T.square(Lf.joint_bilateral_filter(t[0], A, bp))),
              [a0], LOSS_TOL),
        check("data_loss", lambda t: Lf.data_loss(t[0], t[1], A, S, I, bp), [a0, s0], LOSS_TOL),
        check("perceptual_loss", lambda t: Lf.perceptual_loss(t[0], t[1], A, S, fx), [a0, s0], LOSS_TOL),
        check("tv_loss", lambda t: Lf.tv_loss(t[0], t[1]), [a0, s0], LOSS_TOL),
        check("total_loss", lambda t: Lf.compute_loss(t[0], t[1], A, S, I, Lf.LossConfig(extractor=fx))[0],
              [a0, s0], LOSS_TOL),
    ]
    return res


def network_check(seed: int = 0, size: int = 16, entries: int = 3) -> List[CheckResult]:
    """Full desk-preset albedo+shading loss, a few entries of every parameter tensor."""
    rng = np.random.default_rng(seed)
    net_a, net_s = build_pair(NetConfig(K=2, width=16, substructures=2, seed=seed), dtype=np.float64)
    shape = (1, 3, size, size)
    A, S, _ = _images(rng, shape)
    I = A * S
    fx = Lf.FeatureExtractor.surrogate(seed=7)
    cfg = Lf.LossConfig(extractor=fx)

    def loss():
        return Lf.compute_loss(net_a(I).output, net_s(I).output, A, S, I, cfg)[0]

    params = {f"albedo.{k}": v for k, v in net_a.parameters().items()}
    params.update({f"shading.{k}": v for k, v in net_s.parameters().items()})
    T.zero_grad(params.values())
    loss().backward()
    results = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = min(entries, p.size)
        flat = rng.choice(p.size, size=n, replace=False)
        idx = [np.unravel_index(f, p.shape) for f in flat]
        numeric, nk = numeric_grad(lambda: float(loss().data), p.data, EPS, idx)
        err = rel_error(np.array([analytic[i] for i in idx]), numeric, scale=float(np.max(np.abs(analytic))))
        results.append(CheckResult(f"network/{name}", err, LOSS_TOL, n, nk))
    T.zero_grad(params.values())
    return results


def run_suite(seed: int = 0, network: bool = True) -> List[CheckResult]:
    res = op_checks(seed) + loss_checks(seed)
    if network:
        res += network_check(seed)
    return res
