"""PNG and PFM reading/writing; images are float ``[C,H,W]`` arrays in [0, 1]."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("latin-1").rstrip()
        if header not in ("PF", "Pf"):
            raise ImageFormatError(f"{path}: not a PFM file")
        channels = 3 if header == "PF" else 1
        dims = re.match(r"^(\d+)\s+(\d+)\s*$", f.readline().decode("latin-1"))
        if not dims:
            raise ImageFormatError(f"{path}: malformed PFM dimensions line")
        width, height = map(int, dims.groups())
        scale = float(f.readline().decode("latin-1").strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(), dtype=endian + "f4")
    if data.size != width * height * channels:
        raise ImageFormatError(f"{path}: expected {width * height * channels} floats, found {data.size}")
    img = np.flipud(data.reshape(height, width, channels))  # rows are stored bottom-up
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM (negative scale)."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ImageFormatError(f"PFM supports 1 or 3 channels, got {c}")
    hwc = np.flipud(arr.transpose(1, 2, 0))
    with open(path, "wb") as f:
        f.write(f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(hwc, dtype="<f4").tobytes())


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, img: np.ndarray) -> None:
    """Clamp to [0, 1] and quantize to 8 bits."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode_arr = q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)
    Image.fromarray(mode_arr).save(path)


def read_image(path) -> np.ndarray:
    """Return ``[3,H,W]`` float32; single-channel PFMs are replicated."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path)
        return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img
    return read_png(path)


def write_image(path, img: np.ndarray) -> None:
    if Path(path).suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


def image_extents(path) -> Tuple[int, int]:
    """``(H, W)`` from the file header without decoding pixels."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        with open(path, "rb") as f:
            if f.readline().decode("latin-1").rstrip() not in ("PF", "Pf"):
                raise ImageFormatError(f"{path}: not a PFM file")
            dims = f.readline().decode("latin-1").split()
        if len(dims) != 2:
            raise ImageFormatError(f"{path}: malformed PFM dimensions line")
        return int(dims[1]), int(dims[0])
    try:
        with Image.open(path) as im:
            w, h = im.size
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return h, w
