"""Central-difference gradient checks over every differentiable building block."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .cem import CemBlock
from .head import LevelHead, assign_targets, compute_loss
from .layers import Conv, ConvBlock, Deconv, Module, init_params
from .nam import InNcaBlock, NcaBlock
from .neck import CCFPN
from .tensor import Tensor

GRADCHECK_TOL = 1e-5


def _rand(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(out: Tensor | tuple, weights: list[np.ndarray]) -> Tensor:
    """Scalar sum(w_i * out_i) so every output element gets a distinct cotangent."""
    outs = out if isinstance(out, (tuple, list)) else (out,)
    total = None
    for o, w in zip(outs, weights):
        term = (o * w).sum()
        total = term if total is None else total + term
    return total


def _module_case(module: Module, inputs: list[Tensor], rng: np.random.Generator, seed: int,
                 call: Callable | None = None):
    init_params(module, seed)
    call = call or module
    probe = call(*inputs)
    outs = probe if isinstance(probe, (tuple, list)) else (probe,)
    weights = [rng.standard_normal(o.shape) for o in outs]
    params = module.parameters()
    return (lambda *xs: _weighted(call(*xs[:len(inputs)]), weights)), inputs + params


def gradcheck_cases(seed: int = 0) -> dict[str, tuple[Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable, list[Tensor]]] = {}
    cases["conv3x3"] = _module_case(Conv(2, 3, 3), [_rand(rng, 2, 2, 5, 5)], rng, seed)
    cases["conv3x3_stride2"] = _module_case(Conv(2, 2, 3, stride=2), [_rand(rng, 1, 2, 6, 6)], rng, seed)
    cases["conv3x3_dilated"] = _module_case(Conv(2, 2, 3, dilation=2), [_rand(rng, 1, 2, 6, 6)], rng, seed)
    cases["deconv"] = _module_case(Deconv(2, 3), [_rand(rng, 1, 2, 3, 3)], rng, seed)
    cases["conv_bn_silu"] = _module_case(ConvBlock(2, 3, 3), [_rand(rng, 3, 2, 4, 4)], rng, seed)
    cases["cem"] = _module_case(CemBlock(4, 2), [_rand(rng, 2, 4, 4, 4)], rng, seed)
    cases["nam_r2"] = _module_case(NcaBlock(4, 2), [_rand(rng, 1, 4, 4, 4), _rand(rng, 1, 8, 2, 2)], rng, seed)
    cases["in_nam_r2"] = _module_case(InNcaBlock(4, 2), [_rand(rng, 1, 4, 4, 4), _rand(rng, 1, 8, 2, 2)],
                                      rng, seed)
    net = CCFPN([2, 2, 4, 4], 2)
    feats = [_rand(rng, 2, 2, 8, 8), _rand(rng, 2, 2, 4, 4), _rand(rng, 2, 4, 2, 2), _rand(rng, 2, 4, 1, 1)]
    cases["ccfpn_rung"] = _module_case(net, feats, rng, seed,
                                       call=lambda *f: tuple(net(*f)[s] for s in net.strides))
    cases["head"] = _module_case(LevelHead(3), [_rand(rng, 2, 3, 4, 4)], rng, seed)
    cases["total_loss"] = _loss_case(rng)
    return cases


def _loss_case(rng: np.random.Generator):
    # two levels of a 32x32 image; boxes chosen so both levels receive positives
    shapes = {4: (8, 8), 8: (4, 4)}
    gts = [np.array([[3.0, 4.0, 13.0, 11.0], [14.0, 2.0, 30.0, 29.0]]), np.array([[5.0, 20.0, 10.0, 27.0]])]
    targets = assign_targets(gts, shapes)
    tensors = []
    for s, (h, w) in shapes.items():
        tensors += [_rand(rng, 2, 4, h, w, scale=0.3), _rand(rng, 2, 1, h, w), _rand(rng, 2, 1, h, w)]

    def f(*xs):
        output = {s: tuple(xs[3 * i:3 * i + 3]) for i, s in enumerate(shapes)}
        return compute_loss(output, targets)[0]

    return f, tensors


def gradcheck_suite(seed: int = 0, names=None) -> list[tuple[str, float]]:
    """(name, max relative error) for each case."""
    cases = gradcheck_cases(seed)
    out = []
    for name, (f, inputs) in cases.items():
        if names and name not in names:
            continue
        out.append((name, T.gradcheck(f, inputs)))
    return out
