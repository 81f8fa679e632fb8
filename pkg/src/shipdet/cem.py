"""Center enhancement: one 3x3 kernel applied at four quarter-turn orientations."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import ConvBlock, Module, _kaiming
from .tensor import Tensor


def rotational_conv_stack(x: Tensor, f: Tensor) -> Tensor:
    """Concat over k = 0..3 of conv2d(x, rot90(f, k)), stride 1, pad 1."""
    if x.shape[2] != x.shape[3]:
        raise ValueError(f"rotational conv needs a square map, got {x.shape[2]}x{x.shape[3]}")
    if f.shape[2:] != (3, 3):
        raise ValueError("rotational conv kernel must be 3x3")
    return T.concat([T.conv2d(x, T.rot90(f, k), None, 1, 1) for k in range(4)], axis=1)


def rotational_conv_stack_rotated_inputs(x: Tensor, f: Tensor) -> Tensor:
    """Same stack computed by rotating the input instead of the kernel.

    Branch k is rot90(conv2d(rot90(x, -k), f), k), which equals
    conv2d(x, rot90(f, k)) exactly for stride-1 same-padded square maps.
    """
    if x.shape[2] != x.shape[3]:
        raise ValueError(f"rotational conv needs a square map, got {x.shape[2]}x{x.shape[3]}")
    return T.concat([T.rot90(T.conv2d(T.rot90(x, -k), f, None, 1, 1), k) for k in range(4)], axis=1)


class CemBlock(Module):
    def __init__(self, c: int, c_mid: int | None = None):
        self.c = c
        self.c_mid = max(1, c // 4) if c_mid is None else c_mid
        self.kernel = Tensor(np.zeros((self.c_mid, c, 3, 3)), requires_grad=True)
        self.fuse = ConvBlock(4 * self.c_mid, c, 1)

    def init_own(self, seed, prefix):
        self.kernel.data[...] = _kaiming(seed, prefix + ".kernel", self.kernel.shape, self.c * 9)

    def __call__(self, x: Tensor) -> Tensor:
        return cem_forward(x, self)


def cem_forward(x: Tensor, block: CemBlock) -> Tensor:
    return block.fuse(rotational_conv_stack(x, block.kernel))


def cem_param_count(c: int, c_mid: int) -> int:
    return c_mid * c * 9 + 4 * c_mid * c + 2 * c
