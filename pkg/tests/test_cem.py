import numpy as np
import pytest

from shipdet import tensor as T
from shipdet.cem import (
    CemBlock,
    cem_param_count,
    rotational_conv_stack,
    rotational_conv_stack_rotated_inputs,
)
from shipdet.layers import init_params
from shipdet.tensor import Tensor

from oracles import naive_conv2d, rot_ccw


def _case(rng, c=3, cm=2, s=6, n=2):
    return Tensor(rng.standard_normal((n, c, s, s))), Tensor(rng.standard_normal((cm, c, 3, 3)))


def test_symmetric_kernel_gives_identical_groups(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    f = Tensor(np.ones((1, 2, 3, 3)))
    out = rotational_conv_stack(x, f).data
    for k in range(1, 4):
        assert np.array_equal(out[:, k], out[:, 0])


def test_branches_match_loop_reference(rng):
    x, f = _case(rng)
    out = rotational_conv_stack(x, f).data
    cm = f.shape[0]
    for k in range(4):
        ref = naive_conv2d(x.data, rot_ccw(f.data, k), pad=1)
        assert np.max(np.abs(out[:, k * cm:(k + 1) * cm] - ref)) < 1e-12


def test_dual_forms_agree(rng):
    for _ in range(20):
        x, f = _case(rng, s=int(rng.integers(3, 9)))
        a = rotational_conv_stack(x, f).data
        b = rotational_conv_stack_rotated_inputs(x, f).data
        assert np.max(np.abs(a - b)) < 1e-10


def test_group_cyclic_equivariance(rng):
    x, f = _case(rng)
    cm = f.shape[0]
    base = rotational_conv_stack(x, f).data
    rotated = rotational_conv_stack(T.rot90(x, 1), f).data
    for k in range(4):
        expect = rot_ccw(base[:, ((k - 1) % 4) * cm:((k - 1) % 4 + 1) * cm], 1)
        assert np.max(np.abs(rotated[:, k * cm:(k + 1) * cm] - expect)) < 1e-10


def test_non_square_rejected():
    with pytest.raises(ValueError):
        rotational_conv_stack(Tensor(np.zeros((1, 1, 4, 5))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        CemBlock(1)(Tensor(np.zeros((1, 1, 4, 6))))


def test_output_shape_and_default_width():
    blk = CemBlock(64)
    assert blk.c_mid == 16
    init_params(blk, 0)
    out = blk(Tensor(np.random.default_rng(0).standard_normal((2, 64, 32, 32))))
    assert out.shape == (2, 64, 32, 32)


def test_zero_fusion_gives_zero(rng):
    blk = CemBlock(4)
    init_params(blk, 0)
    blk.fuse.conv.weight.data[...] = 0
    assert np.all(blk(Tensor(rng.standard_normal((2, 4, 5, 5)))).data == 0)


def test_single_shared_kernel():
    blk = CemBlock(8, 2)
    spatial = [n for n, p in blk.named_parameters() if p.ndim == 4 and p.shape[2:] == (3, 3)]
    assert spatial == ["kernel"]


@pytest.mark.parametrize("c,cm", [(4, 1), (8, 2), (64, 16), (6, 5)])
def test_param_count_formula(c, cm):
    assert CemBlock(c, cm).num_parameters() == cem_param_count(c, cm) == c * cm * 9 + 4 * cm * c + 2 * c


def test_cem_gradcheck(rng):
    blk = CemBlock(4, 2)
    init_params(blk, 1)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    c = rng.standard_normal((2, 4, 4, 4))
    assert T.gradcheck(lambda a, *p: (blk(a) * c).sum(), [x, *blk.parameters()]) < 1e-6
