"""Reference Gaussian / Laplacian pyramids (fixed kernels, not learnable).

Images are arrays whose last two axes are spatial (``H, W``), e.g. ``(C, H, W)``
or ``(N, C, H, W)``. Borders are handled by reflection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.ndimage import correlate1d


class PyramidError(ValueError):
    pass


def burt_adelson_taps(a: float = 0.4) -> np.ndarray:
    """The 5-tap generating kernel ``[1/4 - a/2, 1/4, a, 1/4, 1/4 - a/2]``."""
    return np.array([0.25 - a / 2, 0.25, a, 0.25, 0.25 - a / 2])


def burt_adelson_kernel(a: float = 0.4) -> np.ndarray:
    t = burt_adelson_taps(a)
    return np.outer(t, t)


def _smooth(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # scipy "mirror" is numpy "reflect" (edge sample not repeated)
    out = correlate1d(img, taps, axis=-2, mode="mirror")
    return correlate1d(out, taps, axis=-1, mode="mirror")


def _taps_of(kernel: np.ndarray) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 1:
        return kernel / kernel.sum()
    # separable kernels are outer products of their (normalized) marginal
    taps = kernel.sum(axis=0)
    return taps / taps.sum()


def gaussian_reduce(img: np.ndarray, kernel: np.ndarray | None = None) -> np.ndarray:
    """Smooth then keep every second row and column."""
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise PyramidError(f"gaussian_reduce needs even extents, got {h}x{w}")
    taps = _taps_of(burt_adelson_taps() if kernel is None else kernel)
    src = np.asarray(img, dtype=np.float64)
    return _smooth(src, taps)[..., ::2, ::2]


def upsample(img: np.ndarray, kernel: np.ndarray | None = None) -> np.ndarray:
    """Zero-interleave to double size, then smooth with 4x the kernel."""
    taps = _taps_of(burt_adelson_taps() if kernel is None else kernel)
    src = np.asarray(img, dtype=np.float64)
    h, w = src.shape[-2:]
    up = np.zeros(src.shape[:-2] + (2 * h, 2 * w))
    up[..., ::2, ::2] = src
    return _smooth(up, 2.0 * taps)


@dataclass
class ImagePyramid:
    """Ordered levels, level 0 at full resolution.

    For ``kind == "laplacian"`` the levels are ``[L_0, ..., L_{K-1}, I_K]``;
    for ``kind == "gaussian"`` they are ``[I_0, ..., I_K]``.
    """

    levels: List[np.ndarray]
    kind: str
    kernel: np.ndarray = field(default_factory=burt_adelson_kernel)

    @property
    def K(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.levels[k]


def _check_divisible(img: np.ndarray, K: int) -> None:
    if K < 0:
        raise PyramidError(f"K must be >= 0, got {K}")
    h, w = img.shape[-2:]
    if h % (2**K) or w % (2**K):
        raise PyramidError(f"extents {h}x{w} are not divisible by 2^{K}={2**K}")


def gaussian_pyramid(img: np.ndarray, K: int, kernel: np.ndarray | None = None) -> ImagePyramid:
    _check_divisible(img, K)
    kernel = burt_adelson_kernel() if kernel is None else kernel
    levels = [np.asarray(img, dtype=np.float64)]
    for _ in range(K):
        levels.append(gaussian_reduce(levels[-1], kernel))
    dtype = np.asarray(img).dtype if np.asarray(img).dtype.kind == "f" else np.float64
    return ImagePyramid([lv.astype(dtype) for lv in levels], "gaussian", np.asarray(kernel))


def laplacian_expand(img: np.ndarray, K: int, kernel: np.ndarray | None = None) -> ImagePyramid:
    """Detail levels ``I_k - u(I_{k+1})`` plus the low band ``I_K``.

    Levels keep the input's floating dtype; arithmetic runs in float64.
    """
    _check_divisible(img, K)
    kernel = burt_adelson_kernel() if kernel is None else kernel
    g = [np.asarray(img, dtype=np.float64)]
    for _ in range(K):
        g.append(gaussian_reduce(g[-1], kernel))
    levels = [g[k] - upsample(g[k + 1], kernel) for k in range(K)] + [g[K]]
    dtype = np.asarray(img).dtype if np.asarray(img).dtype.kind == "f" else np.float64
    return ImagePyramid([lv.astype(dtype) for lv in levels], "laplacian", np.asarray(kernel))


def collapse(pyr: ImagePyramid) -> np.ndarray:
    if pyr.kind != "laplacian":
        raise PyramidError(f"collapse expects a laplacian pyramid, got {pyr.kind!r}")
    acc = np.asarray(pyr.levels[-1], dtype=np.float64)
    for lv in reversed(pyr.levels[:-1]):
        acc = upsample(acc, pyr.kernel) + lv
    return acc.astype(pyr.levels[0].dtype)
