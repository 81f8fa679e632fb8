"""Reduced CSP-style backbone producing C2..C5 at strides 4, 8, 16, 32."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import ConvBlock, Module
from .tensor import Tensor


@dataclass
class BackboneConfig:
    base_width: int = 16
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    in_channels: int = 1
    stem_width: int | None = None

    @property
    def ladder(self) -> list[int]:
        w = self.base_width
        return [4 * w, 8 * w, 16 * w, 32 * w]

    @property
    def strides(self) -> list[int]:
        return [4, 8, 16, 32]


class Bottleneck(Module):
    def __init__(self, c: int):
        self.cv1 = ConvBlock(c, c, 1)
        self.cv2 = ConvBlock(c, c, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.cv2(self.cv1(x))


class CspStage(Module):
    """Split into two halves, run bottlenecks on one, merge with a 1x1."""

    def __init__(self, c: int, depth: int):
        half = max(1, c // 2)
        self.main = ConvBlock(c, half, 1)
        self.short = ConvBlock(c, half, 1)
        self.blocks = [Bottleneck(half) for _ in range(depth)]
        self.merge = ConvBlock(2 * half, c, 1)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.main(x)
        for b in self.blocks:
            y = b(y)
        return self.merge(T.concat([y, self.short(x)], axis=1))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        stem = cfg.stem_width or cfg.base_width
        self.stem = ConvBlock(cfg.in_channels, stem, 3, stride=2)
        cins = [stem] + cfg.ladder[:-1]
        self.downs = [ConvBlock(ci, co, 3, stride=2) for ci, co in zip(cins, cfg.ladder)]
        self.stages = [CspStage(co, d) for co, d in zip(cfg.ladder, cfg.depths)]

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, net: Backbone) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    n, c, h, w = image.shape
    if c != net.cfg.in_channels:
        raise ValueError(f"backbone expects {net.cfg.in_channels} input channels, got {c}")
    if h != w:
        raise ValueError(f"backbone needs a square image, got {h}x{w}")
    if h % 32:
        raise ValueError(f"image size {h} is not divisible by 32")
    x = net.stem(image)
    outs = []
    for down, stage in zip(net.downs, net.stages):
        x = stage(down(x))
        outs.append(x)
    return tuple(outs)
