"""Siamese base network with query-guided squeeze-and-excitation blocks.

Both streams share every convolution weight.  When excitation is enabled,
each residual block computes one weight vector from the channel descriptors
of BOTH streams and applies it to BOTH residual branches:

    s   = sigmoid(W2 relu(W1 [z_q, z_g]))
    out = x + s * u        (channel-wise, per stream)

With excitation disabled the streams are fully independent plain-residual
passes through the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv2d, Linear, Module
from .tensor import Tensor


@dataclass
class BackboneConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    stage_strides: tuple[int, ...] = (2, 2, 2)
    qsse: bool = True
    reduction: int = 16

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def squeeze(u: Tensor) -> Tensor:
    """Condense (1, C, H, W) spatial maps into a (1, C) channel descriptor."""
    return T.global_avg_pool(u)


class Excitation(Module):
    """Two-layer bottleneck over concatenated query+gallery descriptors.

    fc1: 2C -> max(2C // reduction, 4); fc2 back to C; sigmoid keeps every
    component strictly inside (0, 1).
    """

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 16):
        super().__init__()
        reduced = max((2 * channels) // reduction, 4)
        self.fc1 = Linear(rng, 2 * channels, reduced)
        self.fc2 = Linear(rng, reduced, channels)

    def __call__(self, z_q: Tensor, z_g: Tensor) -> Tensor:
        if z_q.shape != z_g.shape:
            raise T.ShapeError(f"excite: descriptors {z_q.shape} vs {z_g.shape}")
        z = T.concat([z_q, z_g], axis=1)
        s = T.sigmoid(self.fc2(T.relu(self.fc1(z))))
        return T.reshape(s, (s.shape[1],))


class ResidualBlock(Module):
    """conv-bn-relu-conv-bn branch with identity (or projected) skip.

    `force_scale` overrides the excitation vector with a constant; used by
    the ablation-consistency checks.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 stride: int = 1, excitation: Excitation | None = None):
        super().__init__()
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = BatchNorm(out_ch)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(rng, in_ch, out_ch, 1, stride=stride, bias=False)
            self.proj_bn = BatchNorm(out_ch)
        self.excitation = excitation
        self.force_scale: np.ndarray | None = None

    def branch(self, x: Tensor) -> Tensor:
        u = self.bn1(self.conv1(x))
        u = T.relu(u)
        return self.bn2(self.conv2(u))

    def shortcut(self, x: Tensor) -> Tensor:
        if self.proj is None:
            return x
        return self.proj_bn(self.proj(x))

    def _combine(self, x: Tensor, u: Tensor, s: Tensor | None) -> Tensor:
        if self.force_scale is not None:
            s = Tensor(self.force_scale)
        if s is not None:
            u = T.scale_channels(u, s)
        return T.relu(T.add(self.shortcut(x), u))

    def forward_single(self, x: Tensor) -> Tensor:
        return self._combine(x, self.branch(x), None)

    def forward_pair(self, x_q: Tensor, x_g: Tensor) -> tuple[Tensor, Tensor]:
        if x_q.shape != x_g.shape:
            raise T.ShapeError(f"qsse block: stream shapes {x_q.shape} vs {x_g.shape}")
        u_q = self.branch(x_q)
        u_g = self.branch(x_g)
        s = None
        if self.excitation is not None and self.force_scale is None:
            s = self.excitation(squeeze(u_q), squeeze(u_g))
        return self._combine(x_q, u_q, s), self._combine(x_g, u_g, s)


def qsse_block(x_q: Tensor, x_g: Tensor, residual_fn, excitation: Excitation) -> tuple[Tensor, Tensor]:
    """One excitation vector from both streams, applied to both residuals.

    Returns x + s * residual_fn(x) per stream, without the trailing relu;
    building block used by ResidualBlock and directly testable.
    """
    if x_q.shape != x_g.shape:
        raise T.ShapeError(f"qsse_block: stream shapes {x_q.shape} vs {x_g.shape}")
    u_q = residual_fn(x_q)
    u_g = residual_fn(x_g)
    s = excitation(squeeze(u_q), squeeze(u_g))
    return (T.add(x_q, T.scale_channels(u_q, s)),
            T.add(x_g, T.scale_channels(u_g, s)))


class Backbone(Module):
    """Stem conv plus residual stages; emits stride-reduced feature maps."""

    def __init__(self, rng: np.random.Generator, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        cfg = self.config
        self.stem = Conv2d(rng, cfg.in_channels, cfg.channels[0], 3, padding=1, bias=False)
        self.stem_bn = BatchNorm(cfg.channels[0])
        blocks: list[ResidualBlock] = []
        in_ch = cfg.channels[0]
        for stage, (out_ch, stride) in enumerate(zip(cfg.channels, cfg.stage_strides)):
            for b in range(cfg.blocks_per_stage):
                exc = Excitation(rng, out_ch, cfg.reduction) if cfg.qsse else None
                blocks.append(ResidualBlock(rng, in_ch, out_ch,
                                            stride=stride if b == 0 else 1,
                                            excitation=exc))
                in_ch = out_ch
        self.blocks = blocks

    def _stem(self, x: Tensor) -> Tensor:
        return T.relu(self.stem_bn(self.stem(x)))

    def forward_single(self, img: Tensor) -> Tensor:
        x = self._stem(img)
        for blk in self.blocks:
            x = blk.forward_single(x)
        return x

    def forward_pair(self, query_img: Tensor, gallery_img: Tensor) -> tuple[Tensor, Tensor]:
        if query_img.shape != gallery_img.shape:
            raise T.ShapeError(
                f"backbone: query {query_img.shape} vs gallery {gallery_img.shape}")
        if not self.config.qsse:
            return self.forward_single(query_img), self.forward_single(gallery_img)
        x_q = self._stem(query_img)
        x_g = self._stem(gallery_img)
        for blk in self.blocks:
            x_q, x_g = blk.forward_pair(x_q, x_g)
        return x_q, x_g
