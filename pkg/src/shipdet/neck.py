"""Pyramid necks: the cross-connected pyramid plus FPN / PAFPN references.

Every neck maps (N2, N3, N4, N5) to a dict ``stride -> Tensor`` of width ``wf``.
"""
from __future__ import annotations

from . import tensor as T
from .layers import ConvBlock, Module
from .tensor import Tensor

NECKS = ("fpn", "pafpn", "ccfpn")


def _check_ladder(feats, ladder):
    ref = feats[0].shape
    for i, (f, c) in enumerate(zip(feats, ladder)):
        want = (ref[0], c, ref[2] >> i, ref[3] >> i)
        if f.shape != want:
            raise ValueError(f"pyramid input {i} has shape {f.shape}, expected {want}")


class CCFPN(Module):
    strides = (4, 8, 16, 32, 64)

    def __init__(self, ladder: list[int], wf: int):
        c2, c3, c4, c5 = ladder
        self.ladder, self.wf = list(ladder), wf
        self.lat3 = ConvBlock(c3, wf, 1)
        self.lat4 = ConvBlock(c4, wf, 1)
        self.lat5 = ConvBlock(c5, wf, 1)
        self.proj2 = ConvBlock(c2, wf, 1)
        self.cross3 = ConvBlock(wf, wf, 3, stride=2)
        self.proj4 = ConvBlock(c4, wf, 1)
        self.fuse4 = ConvBlock(2 * wf, wf, 3, dilation=2)
        self.cross4 = ConvBlock(wf, wf, 3, stride=2)
        self.proj5 = ConvBlock(c5, wf, 1)
        self.fuse5 = ConvBlock(2 * wf, wf, 3, dilation=2)
        self.top = ConvBlock(wf, wf, 3, stride=2)

    def __call__(self, n2, n3, n4, n5) -> dict[int, Tensor]:
        return ccfpn_forward(n2, n3, n4, n5, self)


def ccfpn_forward(n2: Tensor, n3: Tensor, n4: Tensor, n5: Tensor, net: CCFPN) -> dict[int, Tensor]:
    _check_ladder((n2, n3, n4, n5), net.ladder)
    p5 = net.lat5(n5)
    p4 = net.lat4(n4) + T.upsample_nearest2x(p5)
    p3 = net.lat3(n3) + T.upsample_nearest2x(p4)
    # cross rungs: stride-2 conv, concat with the deeper input, dilated fusion
    h4 = net.fuse4(T.concat([net.cross3(p3), net.proj4(n4)], axis=1))
    h5 = net.fuse5(T.concat([net.cross4(h4), net.proj5(n5)], axis=1))
    return {4: net.proj2(n2), 8: p3, 16: h4, 32: h5, 64: net.top(h5)}


class FPN(Module):
    strides = (8, 16, 32)

    def __init__(self, ladder: list[int], wf: int):
        _, c3, c4, c5 = ladder
        self.ladder, self.wf = list(ladder), wf
        self.lat3 = ConvBlock(c3, wf, 1)
        self.lat4 = ConvBlock(c4, wf, 1)
        self.lat5 = ConvBlock(c5, wf, 1)
        self.smooth3 = ConvBlock(wf, wf, 3)
        self.smooth4 = ConvBlock(wf, wf, 3)
        self.smooth5 = ConvBlock(wf, wf, 3)

    def top_down(self, n3, n4, n5):
        p5 = self.lat5(n5)
        p4 = self.lat4(n4) + T.upsample_nearest2x(p5)
        p3 = self.lat3(n3) + T.upsample_nearest2x(p4)
        return p3, p4, p5

    def __call__(self, n2, n3, n4, n5) -> dict[int, Tensor]:
        _check_ladder((n2, n3, n4, n5), self.ladder)
        p3, p4, p5 = self.top_down(n3, n4, n5)
        return {8: self.smooth3(p3), 16: self.smooth4(p4), 32: self.smooth5(p5)}


class PAFPN(Module):
    strides = (8, 16, 32)

    def __init__(self, ladder: list[int], wf: int):
        _, c3, c4, c5 = ladder
        self.ladder, self.wf = list(ladder), wf
        self.lat3 = ConvBlock(c3, wf, 1)
        self.lat4 = ConvBlock(c4, wf, 1)
        self.lat5 = ConvBlock(c5, wf, 1)
        self.smooth3 = ConvBlock(wf, wf, 3)
        self.down3 = ConvBlock(wf, wf, 3, stride=2)
        self.fuse4 = ConvBlock(2 * wf, wf, 3)
        self.down4 = ConvBlock(wf, wf, 3, stride=2)
        self.fuse5 = ConvBlock(2 * wf, wf, 3)

    def __call__(self, n2, n3, n4, n5) -> dict[int, Tensor]:
        _check_ladder((n2, n3, n4, n5), self.ladder)
        p5 = self.lat5(n5)
        p4 = self.lat4(n4) + T.upsample_nearest2x(p5)
        p3 = self.lat3(n3) + T.upsample_nearest2x(p4)
        q3 = self.smooth3(p3)
        q4 = self.fuse4(T.concat([self.down3(q3), p4], axis=1))
        q5 = self.fuse5(T.concat([self.down4(q4), p5], axis=1))
        return {8: q3, 16: q4, 32: q5}


def build_neck(kind: str, ladder: list[int], wf: int) -> Module:
    if kind == "ccfpn":
        return CCFPN(ladder, wf)
    if kind == "fpn":
        return FPN(ladder, wf)
    if kind == "pafpn":
        return PAFPN(ladder, wf)
    raise ValueError(f"unknown neck {kind!r}; expected one of {NECKS}")
