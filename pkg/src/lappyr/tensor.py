"""Minimal reverse-mode automatic differentiation over numpy arrays.

Images use NCHW layout. Every operation records its inputs and a closure that
maps the output gradient to input gradients; :meth:`Tensor.backward` walks the
graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """Dense array with an optional gradient buffer and producer record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("scale", self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return elementwise("scale", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return elementwise("scale", self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients accumulate across calls; call :func:`zero_grad` between steps.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- elementwise


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Pointwise ``add``, ``sub``, ``mul`` or ``scale``; only scalars broadcast."""
    a = _as_tensor(a)
    if kind == "scale" or not isinstance(b, Tensor):
        if isinstance(b, Tensor):
            raise ShapeError("scale expects a Python scalar")
        c = float(b)
        if kind in ("scale", "mul"):
            return _make(a.data * c, (a,), lambda g: (g * c,))
        if kind == "add":
            return _make(a.data + c, (a,), lambda g: (g,))
        if kind == "sub":
            return _make(a.data - c, (a,), lambda g: (g,))
        raise ValueError(f"unknown elementwise kind {kind!r}")

    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    if kind == "add":
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "sub":
        return _make(a.data - b.data, (a, b), lambda g: (g, -g))
    if kind == "mul":
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, c: Scalar):
    return elementwise("scale", a, c)


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * d * g,))


def absolute(x: Tensor) -> Tensor:
    """``|x|`` with subgradient 0 at 0."""
    d = x.data
    return _make(np.abs(d), (x,), lambda g: (g * np.sign(d),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    d = x.data
    neg = d <= 0
    em1 = np.expm1(np.where(neg, d, 0.0))
    out = np.where(neg, alpha * em1, d)
    slope = np.where(neg, alpha * (em1 + 1.0), 1.0).astype(d.dtype)
    return _make(out.astype(d.dtype), (x,), lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    return _make(d * mask, (x,), lambda g: (g * mask,))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g) if _has_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), fn)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ----------------------------------------------------------------- reductions


def reduce(kind: str, x: Tensor) -> Tensor:
    """``sum`` or ``mean`` over every element, returning a 0-d tensor."""
    shape, n = x.shape, x.size
    if kind == "sum":
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))
    if kind == "mean":
        return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))
    raise ValueError(f"unknown reduction {kind!r}")


def tsum(x: Tensor) -> Tensor:
    return reduce("sum", x)


def mean(x: Tensor) -> Tensor:
    return reduce("mean", x)


# ------------------------------------------------------------------- padding


def pad_reflect(x: np.ndarray, ph: int, pw: int, mode: str = "reflect") -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    if mode == "reflect":
        return np.pad(x, width, mode="reflect")
    if mode == "zero":
        return np.pad(x, width)
    raise ValueError(f"unknown padding mode {mode!r}")


def _fold_axis(g: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Adjoint of reflect padding by ``p`` along ``axis``."""
    if p == 0:
        return g
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * p
    core = g[..., p : p + n].copy()
    for i in range(p):
        # padded index i mirrors source index p - i; padded n+p+i mirrors n-2-i
        core[..., p - i] += g[..., i]
        core[..., n - 2 - i] += g[..., n + p + i]
    return np.moveaxis(core, -1, axis)


def unpad_adjoint(g: np.ndarray, ph: int, pw: int, mode: str = "reflect") -> np.ndarray:
    if mode == "zero":
        h, w = g.shape[2], g.shape[3]
        return g[:, :, ph : h - ph, pw : w - pw]
    return _fold_axis(_fold_axis(g, ph, 2), pw, 3)


# ------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.

    ``padding`` defaults to ``(k - 1) // 2`` per axis, which is "same" for odd
    kernels at stride 1.
    """

    kernel_size: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding_mode: str = "reflect"
    in_channels: int = 0
    out_channels: int = 0
    padding: Optional[Tuple[int, int]] = None

    @property
    def pad(self) -> Tuple[int, int]:
        if self.padding is not None:
            return self.padding
        kh, kw = self.kernel_size
        return ((kh - 1) // 2, (kw - 1) // 2)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def _check_conv(x: Tensor, w: Tensor, spec: ConvSpec, ci_axis: int) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv weight must be 4-D, got shape {w.shape}")
    if x.shape[1] != w.shape[ci_axis]:
        raise ShapeError(f"channel dimension mismatch: input has {x.shape[1]}, weight expects {w.shape[ci_axis]}")
    if tuple(w.shape[2:]) != tuple(spec.kernel_size):
        raise ShapeError(f"kernel dimension mismatch: weight {w.shape[2:]} vs spec {spec.kernel_size}")
    if spec.in_channels and spec.in_channels != x.shape[1]:
        raise ShapeError(f"in_channels mismatch: spec {spec.in_channels}, input {x.shape[1]}")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlation of ``x[N,Ci,H,W]`` with ``w[Co,Ci,kh,kw]`` plus bias."""
    _check_conv(x, w, spec, ci_axis=1)
    co = w.shape[0]
    if spec.out_channels and spec.out_channels != co:
        raise ShapeError(f"out_channels mismatch: spec {spec.out_channels}, weight {co}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias dimension mismatch: expected ({co},), got {b.shape}")
    kh, kw = spec.kernel_size
    ph, pw = spec.pad
    s = spec.stride
    n, ci, h, wd = x.shape
    if spec.padding_mode == "reflect" and (ph >= h or pw >= wd):
        raise ShapeError(f"spatial dimension {h}x{wd} too small for reflect padding {(ph, pw)}")
    xp = pad_reflect(x.data, ph, pw, spec.padding_mode)
    ho = (h + 2 * ph - kh) // s + 1
    wo = (wd + 2 * pw - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"spatial dimension too small: {h}x{wd} for kernel {kh}x{kw}")
    cols = _windows(xp, kh, kw, s, ho, wo).reshape(n * ho * wo, ci * kh * kw)
    wmat = w.data.reshape(co, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    xp_shape = xp.shape

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, ci, kh, kw)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = unpad_adjoint(gxp, ph, pw, spec.padding_mode)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(np.ascontiguousarray(out), parents, fn)


def _conv_t_data(xd: np.ndarray, wd: np.ndarray, spec: ConvSpec, out_hw: Tuple[int, int]) -> np.ndarray:
    n, ci, h, w = xd.shape
    co = wd.shape[1]
    kh, kw = spec.kernel_size
    ph, pw = spec.pad
    s = spec.stride
    hp, wp = out_hw[0] + 2 * ph, out_hw[1] + 2 * pw
    xm = xd.transpose(0, 2, 3, 1).reshape(n * h * w, ci)
    cols = (xm @ wd.reshape(ci, -1)).reshape(n, h, w, co, kh, kw)
    yp = np.zeros((n, co, hp, wp), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            yp[:, :, i : i + s * h : s, j : j + s * w : s] += cols[..., i, j].transpose(0, 3, 1, 2)
    return unpad_adjoint(yp, ph, pw, spec.padding_mode), xm


def conv2d_transpose(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Adjoint of the stride-``s`` :func:`conv2d` sharing ``w[Ci,Co,kh,kw]``.

    The forward convolution maps ``s*H x s*W`` to ``H x W`` with the spec's
    padding, so this map always returns exactly ``s*H x s*W``; with reflect
    padding, border taps are folded back instead of cropped.
    """
    _check_conv(x, w, spec, ci_axis=0)
    s = spec.stride
    kh, kw = spec.kernel_size
    ph, pw = spec.pad
    n, ci, h, wd_ = x.shape
    co = w.shape[1]
    out_h, out_w = s * h, s * wd_
    if (out_h + 2 * ph - kh) // s + 1 != h or (out_w + 2 * pw - kw) // s + 1 != wd_:
        raise ShapeError(
            f"transposed conv cannot produce a {s}x output: kernel {kh}x{kw}, padding {(ph, pw)}, stride {s}"
        )
    if spec.padding_mode == "reflect" and (ph >= out_h or pw >= out_w):
        raise ShapeError(f"spatial dimension too small for reflect padding: {out_h}x{out_w}")
    out, xm = _conv_t_data(x.data, w.data, spec, (out_h, out_w))
    wmat = w.data.reshape(ci, -1)

    def fn(g):
        # the output gradient pulled back is exactly a strided conv2d
        gp = pad_reflect(g, ph, pw, spec.padding_mode)
        win = _windows(gp, kh, kw, s, h, wd_).reshape(n * h * wd_, co * kh * kw)
        gx = (win @ wmat.T).reshape(n, h, wd_, ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ win).reshape(w.shape) if w.requires_grad else None
        return (gx, gw)

    return _make(np.ascontiguousarray(out), (x, w), fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (even extents required)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), fn)


def window_filter(x: Tensor, weights: np.ndarray, window: int) -> Tensor:
    """Spatially varying linear filter with constant weights.

    ``weights`` has shape ``(N, Cw, window*window, H, W)`` with ``Cw`` either 1
    (shared across channels) or ``C``. Output pixel ``p`` is
    ``sum_o weights[o, p] * x[p + o]`` over the window, reflect-padded.
    """
    n, c, h, w = x.shape
    r = window // 2
    if weights.shape[0] != n or weights.shape[2] != window * window or weights.shape[3:] != (h, w):
        raise ShapeError(f"filter weights {weights.shape} do not match input {x.shape} / window {window}")
    xp = pad_reflect(x.data, r, r)
    out = np.zeros_like(x.data)
    for o in range(window * window):
        i, j = divmod(o, window)
        out += weights[:, :, o] * xp[:, :, i : i + h, j : j + w]

    def fn(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for o in range(window * window):
            i, j = divmod(o, window)
            gp[:, :, i : i + h, j : j + w] += weights[:, :, o] * g
        return (unpad_adjoint(gp, r, r),)

    return _make(out, (x,), fn)


# --------------------------------------------------------------------- RNG


def make_rng(seed: int) -> np.random.Generator:
    """The single seeded generator used for all parameter initialization."""
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
