"""Residual blocks and the Laplacian-pyramid decomposition network.

Four wirings are supported:

``sequential_a``
    L runs on the downsampled input; H runs on the down/up-sampled input that
    the serial pipeline hands it. Output ``H(u(d(I))) + u(L(d(I)))``, one loss.
``stacked_split_b``
    Same forward map as ``sequential_a``; training splits the loss between the
    low band (L) and the detail band (H).
``parallel_c``
    H runs on the input directly: ``H(I) + u(L(d(I)))``. Optional low-band
    regularizer on L.
``pyramid_d``
    K detail blocks on a learned downsampling cascade plus one low-band block;
    outputs are upsampled and summed from coarse to fine.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .pyramid import burt_adelson_kernel
from .tensor import ConvSpec, Tensor

VARIANTS = ("sequential_a", "stacked_split_b", "parallel_c", "pyramid_d")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    K: int = 4
    width: int = 32
    substructures: int = 6
    variant: str = "pyramid_d"
    seed: int = 0
    samplers: str = "learned"  # or "identity" (no resolution change)
    channels: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


DESK_PRESET = dict(K=2, width=16, substructures=2)
FULL_PRESET = dict(K=4, width=32, substructures=6)


RESIDUAL_INIT_SCALE = 0.1


def he_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv:
    def __init__(self, ci: int, co: int, k: int, rng, dtype, stride: int = 1, bias: bool = True):
        self.spec = ConvSpec((k, k), stride, "reflect", ci, co)
        self.weight = Tensor(he_normal(rng, (co, ci, k, k), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(co, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.spec)

    def params(self) -> Dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class Substructure:
    """Conv3x3 -> ELU -> Conv3x3 -> (+ skip) -> ELU."""

    def __init__(self, ci: int, hidden: int, co: int, rng, dtype):
        self.conv1 = Conv(ci, hidden, 3, rng, dtype)
        self.conv2 = Conv(hidden, co, 3, rng, dtype)
        # residual branch starts small so every unit begins near its (projected) skip path
        self.conv2.weight.data *= RESIDUAL_INIT_SCALE
        # 1x1 projection only where the skip path changes width
        self.proj = Conv(ci, co, 1, rng, dtype) if ci != co else None

    def __call__(self, x: Tensor) -> Tensor:
        r = self.conv2(T.elu(self.conv1(x)))
        skip = self.proj(x) if self.proj is not None else x
        return T.elu(r + skip)

    def params(self) -> Dict[str, Tensor]:
        out = {}
        for name in ("conv1", "conv2", "proj"):
            layer = getattr(self, name)
            if layer is not None:
                out.update({f"{name}.{k}": v for k, v in layer.params().items()})
        return out


class ResidualBlock:
    def __init__(self, channels: int, width: int, n_sub: int, rng, dtype):
        if n_sub < 1:
            raise ConfigError("a residual block needs at least one substructure")
        self.channels = channels
        self.subs: List[Substructure] = []
        for i in range(n_sub):
            ci = channels if i == 0 else width
            co = channels if i == n_sub - 1 else width
            self.subs.append(Substructure(ci, width, co, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"residual block expects {self.channels} channels, got {x.shape[1]}")
        for sub in self.subs:
            x = sub(x)
        return x

    def params(self) -> Dict[str, Tensor]:
        out = {}
        for i, sub in enumerate(self.subs):
            out.update({f"sub{i}.{k}": v for k, v in sub.params().items()})
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())


def bilinear_kernel_4() -> np.ndarray:
    t = np.array([0.25, 0.75, 0.75, 0.25])
    return np.outer(t, t)


class Downsampler:
    """5x5 stride-2 conv, initialized to the Burt-Adelson kernel per channel."""

    def __init__(self, channels: int, dtype):
        w = np.zeros((channels, channels, 5, 5))
        for c in range(channels):
            w[c, c] = burt_adelson_kernel()
        self.spec = ConvSpec((5, 5), 2, "reflect", channels, channels)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.spec)

    def params(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class Upsampler:
    """4x4 stride-2 transposed conv, initialized to bilinear interpolation."""

    def __init__(self, channels: int, dtype):
        w = np.zeros((channels, channels, 4, 4))
        for c in range(channels):
            w[c, c] = bilinear_kernel_4()
        self.spec = ConvSpec((4, 4), 2, "reflect", channels, channels, padding=(1, 1))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.spec)

    def params(self) -> Dict[str, Tensor]:
        return {"weight": self.weight}


class _Identity:
    def __call__(self, x: Tensor) -> Tensor:
        return x

    def params(self) -> Dict[str, Tensor]:
        return {}


@dataclass
class ForwardResult:
    output: Tensor
    components: List[Tensor]


class LapPyrNet:
    def __init__(self, config: NetConfig, dtype=np.float32):
        if config.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {config.variant!r}; expected one of {VARIANTS}")
        if config.K < 1:
            raise ConfigError(f"K must be >= 1, got {config.K}")
        if config.samplers not in ("learned", "identity"):
            raise ConfigError(f"unknown sampler mode {config.samplers!r}")
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = T.make_rng(config.seed)
        c, w, n = config.channels, config.width, config.substructures
        n_levels = config.K if config.variant == "pyramid_d" else 1
        self.blocks = [ResidualBlock(c, w, n, rng, dtype) for _ in range(n_levels + 1)]
        if config.samplers == "identity":
            self.down = [_Identity() for _ in range(n_levels)]
            self.up = [_Identity() for _ in range(n_levels)]
        else:
            self.down = [Downsampler(c, dtype) for _ in range(n_levels)]
            self.up = [Upsampler(c, dtype) for _ in range(n_levels)]

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def scale_depth(self) -> int:
        """Number of 2x reductions between input and the coarsest block."""
        if self.config.samplers == "identity":
            return 0
        return self.K if self.variant == "pyramid_d" else 1

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        n = len(self.blocks) - 1
        for k, blk in enumerate(self.blocks):
            tag = f"H{k}" if k < n else f"L{n}"
            out.update({f"{tag}.{name}": p for name, p in blk.params().items()})
        for k, d in enumerate(self.down):
            out.update({f"down{k}.{name}": p for name, p in d.params().items()})
        for k, u in enumerate(self.up):
            out.update({f"up{k}.{name}": p for name, p in u.params().items()})
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters().values())

    def aggregate(self, components: List[Tensor]) -> Tensor:
        """Coarse-to-fine sum through the learned upsamplers."""
        acc = components[-1]
        for k in range(len(components) - 2, -1, -1):
            acc = self.up[k](acc) + components[k]
        return acc

    def forward(self, image) -> ForwardResult:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.config.channels:
            raise T.ShapeError(f"expected input [N,{self.config.channels},H,W], got {x.shape}")
        depth = self.scale_depth
        h, w = x.shape[2:]
        if h % (2**depth) or w % (2**depth):
            raise T.ShapeError(f"input extents {h}x{w} must be divisible by 2^{depth}={2**depth}")

        if self.variant == "pyramid_d":
            inputs = [x]
            for d in self.down:
                inputs.append(d(inputs[-1]))
            comps = [blk(inp) for blk, inp in zip(self.blocks, inputs)]
            return ForwardResult(self.aggregate(comps), comps)

        h_block, l_block = self.blocks
        low_in = self.down[0](x)
        low = l_block(low_in)
        if self.variant == "parallel_c":
            high = h_block(x)
        else:
            high = h_block(self.up[0](low_in))
        comps = [high, low]
        return ForwardResult(self.aggregate(comps), comps)

    __call__ = forward


def build_lappyrnet(K: int = 4, variant: str = "pyramid_d", seed: int = 0, width: int = 32,
                    substructures: int = 6, samplers: str = "learned", dtype=np.float32) -> LapPyrNet:
    return LapPyrNet(NetConfig(K, width, substructures, variant, seed, samplers), dtype)


def build_pair(config: NetConfig, dtype=np.float32):
    """Albedo and shading networks of identical topology, seeded apart."""
    net_a = LapPyrNet(config, dtype)
    net_s = LapPyrNet(NetConfig(**{**config.to_dict(), "seed": config.seed + 1}), dtype)
    return net_a, net_s


def decompose(net_a: LapPyrNet, net_s: LapPyrNet, image: np.ndarray):
    """Predict raw (unclamped) albedo and shading for ``image`` ``[3,H,W]`` or ``[N,3,H,W]``."""
    img = np.asarray(image)
    batched = img.ndim == 4
    x = img if batched else img[None]
    a = net_a(x.astype(net_a.dtype)).output.data
    s = net_s(x.astype(net_s.dtype)).output.data
    return (a, s) if batched else (a[0], s[0])
