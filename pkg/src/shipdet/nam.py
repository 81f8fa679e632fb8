"""Neighbor attention: recurrent criss-cross attention across two adjacent levels.

``NcaBlock`` attends on the fine grid: queries and keys come from the fine
map, values are lifted from the coarse map by a stride-2 deconvolution.
``InNcaBlock`` mirrors that on the coarse grid.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv, Deconv, Module
from .tensor import Tensor

ATTENTION_MODES = ("criss_cross", "full")


def _attend(mode: str):
    if mode == "criss_cross":
        return T.criss_cross_attend
    if mode == "full":
        return T.full_attend
    raise ValueError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES}")


def criss_cross_attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return T.criss_cross_attend(q, k, v)


def _check_pair(fj: Tensor, fj1: Tensor, c: int) -> None:
    n, cj, h, w = fj.shape
    if cj != c:
        raise ValueError(f"fine level has {cj} channels, block expects {c}")
    if h % 2 or w % 2:
        raise ValueError(f"fine level spatial size {h}x{w} must be even")
    if fj1.shape != (n, 2 * c, h // 2, w // 2):
        raise ValueError(f"coarse level must be {(n, 2 * c, h // 2, w // 2)}, got {fj1.shape}")


class NcaBlock(Module):
    def __init__(self, c: int, recurrence: int = 2, mode: str = "criss_cross"):
        _attend(mode)
        self.c, self.recurrence, self.mode = c, recurrence, mode
        cq = max(1, c // 8)
        self.q_proj = Conv(c, cq, 1)
        self.k_proj = Conv(c, cq, 1)
        self.v_deconv = Deconv(2 * c, 2 * c)
        self.v_proj = Conv(2 * c, c, 1)
        self.out_down = Conv(c, 2 * c, 3, stride=2, bias=False)

    def value_path(self):
        return (self.v_deconv, self.v_proj)

    def __call__(self, fj: Tensor, fj1: Tensor) -> tuple[Tensor, Tensor]:
        return nca_forward(fj, fj1, self)


def nca_forward(fj: Tensor, fj1: Tensor, block: NcaBlock) -> tuple[Tensor, Tensor]:
    _check_pair(fj, fj1, block.c)
    attend = _attend(block.mode)
    v = block.v_proj(block.v_deconv(fj1))
    running = fj
    h = None
    for _ in range(max(1, block.recurrence)):
        h = attend(block.q_proj(running), block.k_proj(running), v)
        running = h + fj
    return running, block.out_down(h) + fj1


class InNcaBlock(Module):
    def __init__(self, c: int, recurrence: int = 2, mode: str = "criss_cross"):
        _attend(mode)
        self.c, self.recurrence, self.mode = c, recurrence, mode
        cq = max(1, (2 * c) // 8)
        self.q_proj = Conv(2 * c, cq, 1)
        self.k_proj = Conv(2 * c, cq, 1)
        self.v_down = Conv(c, 2 * c, 3, stride=2)
        self.v_proj = Conv(2 * c, 2 * c, 1)
        self.up = Deconv(2 * c, c, bias=False)

    def value_path(self):
        return (self.v_down, self.v_proj)

    def __call__(self, fj: Tensor, fj1: Tensor) -> tuple[Tensor, Tensor]:
        return in_nca_forward(fj, fj1, self)


def in_nca_forward(fj: Tensor, fj1: Tensor, block: InNcaBlock) -> tuple[Tensor, Tensor]:
    _check_pair(fj, fj1, block.c)
    attend = _attend(block.mode)
    v = block.v_proj(block.v_down(fj))
    running = fj1
    h = None
    for _ in range(max(1, block.recurrence)):
        h = attend(block.q_proj(running), block.k_proj(running), v)
        running = h + fj1
    return block.up(h) + fj, running


def zero_value_path(block: NcaBlock | InNcaBlock) -> None:
    """Zero the value-path weights and biases (makes the block an identity map)."""
    for layer in block.value_path():
        layer.weight.data[...] = 0.0
        if layer.bias is not None:
            layer.bias.data[...] = 0.0


def affinity_row_sums(q: Tensor, k: Tensor) -> np.ndarray:
    return T.criss_cross_affinity(q, k).sum(axis=-1)
