import numpy as np
import pytest

from shipdet import tensor as T
from shipdet.backbone import Backbone, BackboneConfig
from shipdet.layers import (
    BatchNorm,
    Conv,
    ConvBlock,
    ParamRegistry,
    conv_bn_silu,
    init_params,
    load_state,
    read_checkpoint,
    save_checkpoint,
    splitmix64,
    uniform_stream,
)
from shipdet.model import ModelConfig, build_model
from shipdet.tensor import Tensor


def test_splitmix64_reference_sequence():
    # first outputs of the reference splitmix64 generator seeded with 0
    golden = 0x9E3779B97F4A7C15
    states = np.array([(i * golden) % 2 ** 64 for i in range(3)], dtype=np.uint64)
    got = [int(v) for v in splitmix64(states)]
    assert got == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_uniform_stream_range_and_keys():
    u = uniform_stream(3, "a", 10000)
    assert u.min() >= 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01
    assert not np.array_equal(u[:10], uniform_stream(3, "b", 10))
    assert np.array_equal(u[:10], uniform_stream(3, "a", 10))


def test_conv_bn_silu_zero_weights():
    blk = ConvBlock(3, 4, 3)
    init_params(blk, 0)
    blk.conv.weight.data[...] = 0
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
    assert np.all(conv_bn_silu(x, blk).data == 0)


def test_conv_bn_silu_identity_is_silu():
    blk = ConvBlock(3, 3, 1).eval()
    init_params(blk, 0)
    blk.conv.weight.data[...] = np.eye(3)[:, :, None, None]
    x = np.random.default_rng(1).standard_normal((1, 3, 4, 4))
    out = blk(Tensor(x)).data
    ref = x / np.sqrt(1 + 1e-5)
    assert np.allclose(out, ref / (1 + np.exp(-ref)), atol=1e-15)


def test_conv_bn_silu_channel_mismatch():
    with pytest.raises(ValueError):
        ConvBlock(3, 4)(Tensor(np.zeros((1, 2, 4, 4))))


def test_conv_block_gradcheck():
    blk = ConvBlock(2, 3, 3)
    init_params(blk, 2)
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))
    c = rng.standard_normal((2, 3, 4, 4))
    assert T.gradcheck(lambda a, *p: (blk(a) * c).sum(), [x, *blk.parameters()]) < 1e-6


def test_init_determinism_and_bounds():
    cfg = ModelConfig(base_width=4, neck_width=8)
    a, b = build_model(cfg, seed=5), build_model(cfg, seed=5)
    assert ParamRegistry(a).checksum() == ParamRegistry(b).checksum()
    assert ParamRegistry(a).checksum() != ParamRegistry(build_model(cfg, seed=6)).checksum()
    for name, p in a.named_parameters():
        if name.endswith("weight") or name.endswith("kernel"):
            fan_in = int(np.prod(p.shape[1:]))
            if ".up." in name or "deconv" in name:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            assert np.all(np.abs(p.data) <= np.sqrt(6.0 / fan_in)), name


def test_bias_only_where_no_batchnorm():
    blk = ConvBlock(2, 2, 3)
    assert blk.conv.bias is None
    assert Conv(2, 2).bias is not None


def test_registry_names_unique_and_ordered():
    m = build_model(ModelConfig(base_width=4, neck_width=8))
    reg = ParamRegistry(m)
    names = [n for n, _ in reg]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in ParamRegistry(m)]
    assert reg.count() == m.num_parameters()


def _block(cin, cout, k):
    return cin * cout * k * k + 2 * cout


def backbone_formula(w, depths=(1, 1, 1, 1), cin=1):
    ladder = [4 * w, 8 * w, 16 * w, 32 * w]
    total = _block(cin, w, 3)
    prev = w
    for c, d in zip(ladder, depths):
        half = c // 2
        total += _block(prev, c, 3)
        total += 2 * _block(c, half, 1) + _block(2 * half, c, 1)
        total += d * (_block(half, half, 1) + _block(half, half, 3))
        prev = c
    return total


@pytest.mark.parametrize("w", [4, 8, 16])
def test_backbone_param_formula(w):
    assert Backbone(BackboneConfig(w)).num_parameters() == backbone_formula(w)


def test_tiny_backbone_param_constant():
    assert Backbone(BackboneConfig(16)).num_parameters() == 3_132_080  # backbone_formula(16)


def test_all_parameters_receive_gradients():
    m = build_model(ModelConfig(base_width=4, neck_width=8))
    rng = np.random.default_rng(0)
    out = m(Tensor(rng.standard_normal((2, 1, 64, 64))))
    loss = None
    for s in out:
        for t_ in out[s]:
            term = (t_ * rng.standard_normal(t_.shape)).sum()
            loss = term if loss is None else loss + term
    loss.backward()
    dead = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(base_width=4, neck_width=8)
    m = build_model(cfg, seed=1)
    bn = next(mod for _, mod in m.named_modules() if isinstance(mod, BatchNorm))
    bn.running_mean[...] = 0.25
    save_checkpoint(tmp_path / "a.ckpt", m, {"model": cfg.to_dict()})
    manifest, arrays = read_checkpoint(tmp_path / "a.ckpt")
    assert manifest["meta"]["model"]["base_width"] == 4
    names = [e["name"] for e in manifest["tensors"]]
    assert names[:len(list(m.named_parameters()))] == [n for n, _ in m.named_parameters()]
    fresh = build_model(cfg, seed=2)
    load_state(fresh, arrays)
    assert ParamRegistry(fresh).checksum() == ParamRegistry(m).checksum()
    fresh_bn = next(mod for _, mod in fresh.named_modules() if isinstance(mod, BatchNorm))
    assert np.all(fresh_bn.running_mean == 0.25)
    save_checkpoint(tmp_path / "b.ckpt", fresh, {"model": cfg.to_dict()})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_load_state_rejects_mismatch(tmp_path):
    m = build_model(ModelConfig(base_width=4, neck_width=8))
    save_checkpoint(tmp_path / "a.ckpt", m)
    _, arrays = read_checkpoint(tmp_path / "a.ckpt")
    other = build_model(ModelConfig(base_width=8, neck_width=8))
    with pytest.raises(ValueError):
        load_state(other, arrays)
