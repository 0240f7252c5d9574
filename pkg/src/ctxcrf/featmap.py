"""Multi-scale feature trunk with sliding pyramid pooling.

The input image is resized to each scale, pushed through a stack of shared
convolution blocks and one scale-specific block, the per-scale maps are
bilinearly upscaled to the largest map, concatenated along channels, and
finally max-pooled with stride 1 at every pyramid window and concatenated
again (original first, then windows in ascending order).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ParamStore, Tensor


@dataclass(frozen=True)
class BlockSpec:
    """``convs`` conv+ReLU layers followed by a 3x3 max pool (``pool_stride`` 0 = no pool)."""

    channels: int
    convs: int = 1
    pool_stride: int = 2
    kernel: int = 1


def _default_shared() -> tuple[BlockSpec, ...]:
    return (
        BlockSpec(8, 1, 2),
        BlockSpec(16, 1, 2),
        BlockSpec(16, 1, 2),
        BlockSpec(16, 1, 2),
        BlockSpec(16, 1, 1),
    )


@dataclass(frozen=True)
class FeatMapConfig:
    scales: tuple[float, ...] = (1.2, 0.8, 0.4)
    shared_blocks: tuple[BlockSpec, ...] = field(default_factory=_default_shared)
    scale_block: BlockSpec = BlockSpec(8, 1, 0)
    pool_windows: tuple[int, ...] = (5, 9)
    downsample_factor: int = 16
    in_channels: int = 3
    # pixels enter the trunk as (x + input_shift) * input_scale
    input_shift: float = 0.0
    input_scale: float = 1.0
    # average with the vertically mirrored pass: output is exactly equivariant
    # under top/bottom reflection of the input
    reflect_average: bool = False

    def validate(self) -> None:
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales: need positive values, got {self.scales}")
        if list(self.scales) != sorted(self.scales, reverse=True):
            raise ValueError(f"scales: must be sorted descending, got {self.scales}")
        if self.input_scale <= 0:
            raise ValueError(f"input_scale: must be positive, got {self.input_scale}")
        if any(w < 1 or w % 2 == 0 for w in self.pool_windows):
            raise ValueError(f"pool_windows: all windows must be odd, got {self.pool_windows}")
        strides = [b.pool_stride for b in self.shared_blocks if b.pool_stride] + (
            [self.scale_block.pool_stride] if self.scale_block.pool_stride else []
        )
        if math.prod(strides) != self.downsample_factor:
            raise ValueError(
                f"downsample_factor: {self.downsample_factor} != product of pool strides {strides}"
            )
        for b in (*self.shared_blocks, self.scale_block):
            if b.channels < 1 or b.convs < 1 or b.kernel % 2 == 0 or b.pool_stride < 0:
                raise ValueError(f"shared_blocks/scale_block: invalid block {b}")

    @property
    def d_scale(self) -> int:
        return self.scale_block.channels

    @property
    def out_channels(self) -> int:
        return (1 + len(self.pool_windows)) * len(self.scales) * self.d_scale

    def min_input_size(self) -> int:
        return math.ceil(self.downsample_factor / min(self.scales))


def scaled_size(n: int, scale: float) -> int:
    return max(1, int(round(scale * n)))


def pooled_size(n: int, stride: int) -> int:
    # 3x3 window, pad 1
    return (n + 2 - 3) // stride + 1 if stride else n


@dataclass
class FeatureMap:
    tensor: Tensor  # [d,h,w] or [N,d,h,w]
    geometry: np.ndarray  # [h,w,4] boxes (y0,x0,y1,x1) in input pixels

    @property
    def height(self) -> int:
        return self.tensor.shape[-2]

    @property
    def width(self) -> int:
        return self.tensor.shape[-1]

    @property
    def channels(self) -> int:
        return self.tensor.shape[-3]


def sliding_pyramid_pool(fmap, windows) -> Tensor:
    """Concatenate the map with stride-1 max pools at each window (ascending)."""
    fmap = nn.as_tensor(fmap)
    windows = sorted(windows)
    if any(k % 2 == 0 for k in windows):
        raise ValueError(f"pyramid windows must be odd, got {windows}")
    axis = fmap.ndim - 3
    parts = [fmap] + [nn.max_pool2d(fmap, k, stride=1, pad=(k - 1) // 2) for k in windows]
    return nn.concat(parts, axis=axis)


def receptive_boxes(h: int, w: int, in_h: int, in_w: int) -> np.ndarray:
    """Regular partition of the input into ``h x w`` cells, one per node."""
    ys = np.round(np.linspace(0, in_h, h + 1)).astype(int)
    xs = np.round(np.linspace(0, in_w, w + 1)).astype(int)
    boxes = np.zeros((h, w, 4), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            boxes[r, c] = (ys[r], xs[c], ys[r + 1], xs[c + 1])
    return boxes


class FeatMapNet:
    def __init__(self, config: FeatMapConfig, params: ParamStore, prefix: str = ""):
        self.config = config
        self.params = params
        self.prefix = prefix

    def _block(self, x: Tensor, spec: BlockSpec, tag: str) -> Tensor:
        for j in range(spec.convs):
            base = f"{self.prefix}{tag}.conv{j + 1}"
            x = nn.relu(
                nn.conv2d(x, self.params[base + ".weight"], self.params[base + ".bias"], 1, spec.kernel // 2)
            )
        if spec.pool_stride:
            x = nn.max_pool2d(x, 3, stride=spec.pool_stride, pad=1)
        return x

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        h, w = scaled_size(height, self.config.scales[0]), scaled_size(width, self.config.scales[0])
        for b in (*self.config.shared_blocks, self.config.scale_block):
            h, w = pooled_size(h, b.pool_stride), pooled_size(w, b.pool_stride)
        return h, w

    def _fused(self, image: Tensor) -> Tensor:
        cfg = self.config
        height, width = image.shape[-2:]
        maps = []
        for si, s in enumerate(cfg.scales):
            x = nn.bilinear_resize(image, scaled_size(height, s), scaled_size(width, s))
            for bi, spec in enumerate(cfg.shared_blocks):
                x = self._block(x, spec, f"trunk.block{bi + 1}")
            x = self._block(x, cfg.scale_block, f"scale{si}.block{len(cfg.shared_blocks) + 1}")
            maps.append(x)
        h, w = maps[0].shape[-2:]
        maps = [m if m.shape[-2:] == (h, w) else nn.bilinear_resize(m, h, w) for m in maps]
        fused = nn.concat(maps, axis=image.ndim - 3)
        if cfg.pool_windows:
            fused = sliding_pyramid_pool(fused, cfg.pool_windows)
        return fused

    def forward(self, image) -> FeatureMap:
        cfg = self.config
        image = nn.as_tensor(image)
        if image.ndim not in (3, 4) or image.shape[-3] != cfg.in_channels:
            raise ValueError(f"expected [{cfg.in_channels},H,W] image(s), got {image.shape}")
        height, width = image.shape[-2:]
        need = cfg.min_input_size()
        if height < need or width < need:
            raise ValueError(f"image {height}x{width} too small: minimum size is {need}x{need}")
        if cfg.input_shift != 0.0 or cfg.input_scale != 1.0:
            image = nn.affine(image, cfg.input_shift, cfg.input_scale)
        fused = self._fused(image)
        if cfg.reflect_average:
            rows = image.ndim - 2
            mirrored = nn.flip(self._fused(nn.flip(image, rows)), rows)
            fused = nn.scale(nn.add(fused, mirrored), 0.5)
        h, w = fused.shape[-2:]
        return FeatureMap(fused, receptive_boxes(h, w, height, width))

    __call__ = forward


def build_featmapnet(
    config: FeatMapConfig, rng_seed: int, params: ParamStore | None = None, prefix: str = ""
) -> tuple[FeatMapNet, ParamStore]:
    config.validate()
    params = ParamStore() if params is None else params
    rng = np.random.default_rng(rng_seed)

    def add_block(spec: BlockSpec, c_in: int, tag: str) -> int:
        for j in range(spec.convs):
            k = spec.kernel
            base = f"{prefix}{tag}.conv{j + 1}"
            shape = (spec.channels, c_in, k, k)
            params.add(base + ".weight", nn.glorot_uniform(rng, shape, c_in * k * k, spec.channels * k * k))
            params.add(base + ".bias", np.zeros(spec.channels))
            c_in = spec.channels
        return c_in

    c = config.in_channels
    for bi, spec in enumerate(config.shared_blocks):
        c = add_block(spec, c, f"trunk.block{bi + 1}")
    for si in range(len(config.scales)):
        add_block(config.scale_block, c, f"scale{si}.block{len(config.shared_blocks) + 1}")
    return FeatMapNet(config, params, prefix), params


def featmap_forward(net: FeatMapNet, image) -> FeatureMap:
    return net.forward(image)
