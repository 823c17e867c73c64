"""Datasets of (input, albedo, shading) triples, augmentation, synthesis.

Manifest format: one tab-separated record per line::

    id <TAB> scene <TAB> input_path <TAB> albedo_path <TAB> shading_path

``scene`` may be ``-``. Blank lines and lines starting with ``#`` are skipped.
Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import zoom

from . import imageio
from .losses import BilateralParams, bilateral_weights


class DataError(ValueError):
    """Base for dataset problems (mapped to exit code 2 by the CLI)."""


class ManifestMissingError(DataError):
    pass


class MissingImageError(DataError):
    pass


class MalformedLineError(DataError):
    pass


class ExtentMismatchError(DataError):
    pass


@dataclass
class SamplePair:
    input: np.ndarray
    albedo: np.ndarray
    shading: np.ndarray
    id: str = ""
    scene: Optional[str] = None

    def __post_init__(self):
        shapes = {self.input.shape, self.albedo.shape, self.shading.shape}
        if len(shapes) != 1:
            raise ExtentMismatchError(f"pair {self.id!r}: extents differ {sorted(shapes)}")

    @property
    def extents(self) -> Tuple[int, int]:
        return self.input.shape[-2:]

    def product_exact(self) -> bool:
        return bool(np.array_equal(self.input, self.albedo * self.shading))


@dataclass
class ManifestRecord:
    id: str
    scene: Optional[str]
    paths: Tuple[Path, Path, Path]


class Dataset:
    """Sequence of :class:`SamplePair`; manifest-backed pairs load on access."""

    def __init__(self, items: Sequence = (), manifest_path: Optional[Path] = None, split_mode: str = "none"):
        self._items = list(items)
        self.manifest_path = manifest_path
        self.split_mode = split_mode
        ids = [self.id_of(i) for i in range(len(self._items))]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate pair ids in dataset")

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> SamplePair:
        item = self._items[i]
        if isinstance(item, SamplePair):
            return item
        inp, alb, sh = (imageio.read_image(p) for p in item.paths)
        return SamplePair(inp, alb, sh, item.id, item.scene)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def id_of(self, i: int) -> str:
        return self._items[i].id

    def scene_of(self, i: int) -> Optional[str]:
        return self._items[i].scene

    @property
    def pairs(self) -> List[SamplePair]:
        return list(self)

    def subset(self, indices: Sequence[int], split_mode: Optional[str] = None) -> "Dataset":
        return Dataset([self._items[i] for i in indices], self.manifest_path, split_mode or self.split_mode)

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self._items + other._items, self.manifest_path, self.split_mode)


def load_manifest(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ManifestMissingError(f"manifest not found: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise MalformedLineError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
        pid, scene, *rel = cols
        paths = tuple((base / p) if not Path(p).is_absolute() else Path(p) for p in rel)
        for p in paths:
            if not p.is_file():
                raise MissingImageError(f"{path}:{lineno}: pair {pid!r} references missing file {p}")
        try:
            extents = {imageio.image_extents(p) for p in paths}
        except imageio.ImageFormatError as exc:
            raise MalformedLineError(f"{path}:{lineno}: {exc}") from exc
        if len(extents) != 1:
            raise ExtentMismatchError(f"{path}:{lineno}: pair {pid!r} has mismatched extents {sorted(extents)}")
        records.append(ManifestRecord(pid, None if scene == "-" else scene, paths))
    try:
        return Dataset(records, path)
    except DataError as exc:
        raise MalformedLineError(f"{path}: {exc}") from exc


def write_manifest(path, rows: Sequence[Tuple[str, Optional[str], str, str, str]]) -> None:
    lines = ["\t".join([pid, scene or "-", i, a, s]) for pid, scene, i, a, s in rows]
    Path(path).write_text("".join(line + "\n" for line in lines))


def split(ds: Dataset, mode: str = "image_split", seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Disjoint train/test halves (train gets the extra item when odd)."""
    rng = np.random.default_rng(seed)
    if mode == "image_split":
        order = rng.permutation(len(ds))
        n_train = (len(ds) + 1) // 2
        return ds.subset(sorted(order[:n_train]), mode), ds.subset(sorted(order[n_train:]), mode)
    if mode == "scene_split":
        scenes = [ds.scene_of(i) for i in range(len(ds))]
        if any(s is None for s in scenes):
            raise DataError("scene_split requires a scene label on every pair")
        uniq = sorted(set(scenes))
        order = rng.permutation(len(uniq))
        train_scenes = {uniq[i] for i in order[: (len(uniq) + 1) // 2]}
        tr = [i for i, s in enumerate(scenes) if s in train_scenes]
        te = [i for i, s in enumerate(scenes) if s not in train_scenes]
        return ds.subset(tr, mode), ds.subset(te, mode)
    if mode == "none":
        return ds, ds.subset([], mode)
    raise DataError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------- augmentation


def rescale_bilinear(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img
    return zoom(img, (1.0, factor, factor), order=1, mode="nearest", grid_mode=True).astype(img.dtype)


def augment_pair(pair: SamplePair, rng: np.random.Generator, crop: Optional[int],
                 scale_range=(0.8, 1.2), flip_p: float = 0.5, multiple: int = 1) -> SamplePair:
    """Rescale, crop and flip one pair with a single shared transform.

    The scale factor is raised when needed so the rescaled pair still
    contains the crop.

    When the source satisfies ``input == albedo * shading`` exactly, the
    rescaled input is re-synthesized from the rescaled factors so the label
    stays exact (bilinear interpolation does not commute with products).
    """
    exact = pair.product_exact()
    s = float(rng.uniform(*scale_range)) if scale_range[0] != scale_range[1] else float(scale_range[0])
    if crop is not None:
        # never shrink below the crop; a source too small even at the top scale is an error
        h0, w0 = pair.extents
        need = crop / min(h0, w0)
        if need > max(scale_range[1], 1.0) + 1e-12:
            raise DataError(f"crop {crop} larger than pair {pair.id!r} ({h0}x{w0}) at scale {scale_range[1]}")
        s = max(s, need)
    a = rescale_bilinear(pair.albedo, s)
    sh = rescale_bilinear(pair.shading, s)
    i = a * sh if exact and s != 1.0 else rescale_bilinear(pair.input, s)
    h, w = a.shape[-2:]
    # without a crop the rescaled pair is trimmed to the nearest multiple
    ch, cw = (h - h % multiple, w - w % multiple) if crop is None else (crop, crop)
    if ch % multiple or cw % multiple:
        raise DataError(f"crop {ch}x{cw} must be divisible by {multiple}")
    if ch > h or cw > w:
        raise DataError(f"crop {ch}x{cw} larger than scaled extents {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < flip_p)

    def tf(img):
        out = img[:, y0 : y0 + ch, x0 : x0 + cw]
        return np.ascontiguousarray(out[:, :, ::-1] if flip else out)

    return SamplePair(tf(i), tf(a), tf(sh), pair.id, pair.scene)


def sample_batch(ds: Dataset, rng: np.random.Generator, batch: int, crop: Optional[int] = 256,
                 scale_range=(0.8, 1.2), flip_p: float = 0.5, multiple: int = 1) -> List[SamplePair]:
    if len(ds) == 0:
        raise DataError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(ds), size=batch)
    return [augment_pair(ds[int(i)], rng, crop, scale_range, flip_p, multiple) for i in idx]


def stack_batch(pairs: Sequence[SamplePair], dtype=np.float32):
    """``(I, A, S)`` as ``[N,3,H,W]`` arrays."""
    shapes = {p.input.shape for p in pairs}
    if len(shapes) > 1:
        raise ExtentMismatchError(f"cannot batch pairs of different extents {sorted(shapes)}; set a crop")
    return tuple(np.stack([getattr(p, f) for p in pairs]).astype(dtype) for f in ("input", "albedo", "shading"))


# ------------------------------------------------------------------- synthesis


def synth_mondrian(seed: int, extents: Tuple[int, int] = (64, 64), n_rects: int = 6,
                   n_bumps: int = 4, dtype=np.float32) -> SamplePair:
    """Piecewise-constant albedo rectangles under a smooth positive shading field."""
    h, w = extents
    rng = np.random.default_rng(seed)
    albedo = np.empty((3, h, w))
    albedo[:] = rng.uniform(0.2, 0.9, size=3)[:, None, None]
    for _ in range(n_rects):
        y0, x0 = rng.integers(0, h - h // 8), rng.integers(0, w - w // 8)
        rh = int(rng.integers(h // 8, h // 2 + 1))
        rw = int(rng.integers(w // 8, w // 2 + 1))
        albedo[:, y0 : y0 + rh, x0 : x0 + rw] = rng.uniform(0.1, 0.95, size=3)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field_ = np.zeros((h, w))
    for _ in range(n_bumps):
        cy, cx = rng.uniform(-0.2, 1.2, size=2)
        sig = rng.uniform(0.25, 0.6)
        field_ += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    lo, hi = field_.min(), field_.max()
    field_ = 0.2 + 0.8 * (field_ - lo) / (hi - lo if hi > lo else 1.0)
    a = albedo.astype(dtype)
    s = np.repeat(field_[None], 3, axis=0).astype(dtype)
    return SamplePair(a * s, a, s, f"mondrian_{seed}", None)


def synth_dataset(n: int, seed: int, extents=(64, 64), scenes: int = 0) -> Dataset:
    pairs = []
    for k in range(n):
        p = synth_mondrian(seed * 100003 + k, extents)
        p.id = f"synth_{seed}_{k:04d}"
        p.scene = f"scene{k % scenes}" if scenes else None
        pairs.append(p)
    return Dataset(pairs)


# -------------------------------------------------------------- self-augmenting


def detail_sigma_r(img: np.ndarray, k: float = 3.0, floor: float = 0.01) -> float:
    """``k`` times a robust estimate of the fine-detail amplitude of the luminance.

    The estimate is the MAD of first differences (divided by sqrt 2), so a few
    strong edges do not inflate it; differences above the range width survive.
    """
    from .losses import luminance

    x = np.asarray(img, dtype=np.float64)
    lum = luminance(x if x.ndim == 4 else x[None])
    d = np.concatenate([np.diff(lum, axis=-1).ravel(), np.diff(lum, axis=-2).ravel()])
    mad = np.median(np.abs(d - np.median(d)))
    return max(floor, k * 1.4826 * mad / math.sqrt(2.0))


def edge_aware_smooth(img: np.ndarray, strength: float = 1.0, iterations: int = 3) -> np.ndarray:
    """Iterated joint-bilateral self-filtering.

    Each pass filters the current image guided by itself with spatial width
    ``2 * strength`` and a range width adapted to the detail level (see
    :func:`detail_sigma_r`). ``strength == 0`` is a no-op.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    arr = np.asarray(img, dtype=np.float64)
    if strength == 0:
        return np.asarray(img).copy()
    batched = arr.ndim == 4
    x = arr if batched else arr[None]
    sigma_s = 2.0 * strength
    window = 2 * int(math.ceil(2 * sigma_s)) + 1
    window = min(window, 2 * (min(x.shape[-2:]) - 1) + 1)
    r = window // 2
    for _ in range(iterations):
        params = BilateralParams(sigma_s=sigma_s, sigma_r=detail_sigma_r(x), window=window)
        wts = bilateral_weights(x, params)
        xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="reflect")
        out = np.zeros_like(x)
        h, w = x.shape[-2:]
        for o in range(window * window):
            i, j = divmod(o, window)
            out += wts[:, :, o] * xp[:, :, i : i + h, j : j + w]
        x = out
    out = x if batched else x[0]
    return out.astype(np.asarray(img).dtype)


def augmentation_size(n_labeled: int, factor: int = 2) -> int:
    return factor * n_labeled


def self_augment(net_a, net_s, unlabeled: Sequence[np.ndarray], strength: float = 1.0,
                 id_prefix: str = "aug") -> List[SamplePair]:
    """Predict, smooth and re-synthesize exactly-labeled pairs.

    Smoothed factors are clipped to [0, 1] before ``I = A * S`` is formed.
    """
    from .network import decompose

    out = []
    for k, img in enumerate(unlabeled):
        a_pred, s_pred = decompose(net_a, net_s, np.asarray(img, dtype=np.float32))
        a = np.clip(edge_aware_smooth(a_pred, strength), 0.0, 1.0).astype(np.float32)
        s = np.clip(edge_aware_smooth(s_pred, strength), 0.0, 1.0).astype(np.float32)
        out.append(SamplePair(a * s, a, s, f"{id_prefix}_{k:05d}", None))
    return out


def augmented_dataset(net_a, net_s, labeled: Dataset, unlabeled: Sequence[np.ndarray],
                      strength: float = 1.0, factor: int = 2,
                      rng: Optional[np.random.Generator] = None) -> Dataset:
    """``factor * len(labeled)`` synthesized pairs, cycling ``unlabeled`` with flips."""
    if not unlabeled:
        raise DataError("no unlabeled images to augment from")
    rng = rng or np.random.default_rng(0)
    target = augmentation_size(len(labeled), factor)
    sources = []
    for k in range(target):
        img = np.asarray(unlabeled[k % len(unlabeled)])
        if k >= len(unlabeled) and rng.random() < 0.5:
            img = img[:, :, ::-1]
        sources.append(np.ascontiguousarray(img))
    return Dataset(self_augment(net_a, net_s, sources, strength))
