"""Parameterized layers, deterministic initialization and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, key: str, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1) from a counter-based stream keyed by (seed, key)."""
    salt = np.uint64(zlib.crc32(key.encode()))
    base = splitmix64(np.array([(seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64) ^ salt)[0]
    with np.errstate(over="ignore"):
        counters = base + np.arange(n, dtype=np.uint64) * _GOLDEN
    bits = splitmix64(counters) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


class Module:
    """Tree of tensors. Direct Tensor attributes with requires_grad are parameters."""

    training = True

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, mod in self.named_modules():
            for name, val in vars(mod).items():
                if isinstance(val, Tensor) and val.requires_grad:
                    yield (f"{prefix}.{name}" if prefix else name), val

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "buffer_names", ()):
                yield (f"{prefix}.{name}" if prefix else name), getattr(mod, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def init_own(self, seed: int, prefix: str) -> None:
        """Initialize this module's direct tensors. Overridden by leaf layers."""

    def post_init(self) -> None:
        """Hook run after every module has been initialized."""

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _kaiming(seed: int, key: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    u = uniform_stream(seed, key, int(np.prod(shape)))
    return ((2.0 * u - 1.0) * bound).reshape(shape)


def _bias_init(seed: int, key: str, n: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (2.0 * uniform_stream(seed, key, n) - 1.0) * bound


class Conv(Module):
    """Plain convolution with bias."""

    def __init__(self, cin: int, cout: int, k: int = 1, stride: int = 1, pad: int | None = None,
                 dilation: int = 1, bias: bool = True):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.dilation = stride, dilation
        self.pad = dilation * (k - 1) // 2 if pad is None else pad
        self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def init_own(self, seed, prefix):
        fan_in = self.cin * self.k * self.k
        self.weight.data[...] = _kaiming(seed, prefix + ".weight", self.weight.shape, fan_in)
        if self.bias is not None:
            self.bias.data[...] = _bias_init(seed, prefix + ".bias", self.cout, fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class Deconv(Module):
    """Transposed 3x3 (by default) convolution that doubles the spatial size."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 2, pad: int = 1,
                 output_padding: int = 1, bias: bool = True):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.pad, self.output_padding = stride, pad, output_padding
        self.weight = Tensor(np.zeros((cin, cout, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def init_own(self, seed, prefix):
        fan_in = self.cout * self.k * self.k
        self.weight.data[...] = _kaiming(seed, prefix + ".weight", self.weight.shape, fan_in)
        if self.bias is not None:
            self.bias.data[...] = _bias_init(seed, prefix + ".bias", self.cout, fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return T.deconv2d(x, self.weight, self.bias, self.stride, self.pad, self.output_padding)


class BatchNorm(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int):
        self.c = c
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def init_own(self, seed, prefix):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ConvBlock(Module):
    """Conv (no bias) -> BN -> optional SiLU."""

    def __init__(self, cin: int, cout: int, k: int = 1, stride: int = 1, dilation: int = 1,
                 act: bool = True):
        self.conv = Conv(cin, cout, k, stride, dilation=dilation, bias=False)
        self.bn = BatchNorm(cout)
        self.act = act

    @property
    def cin(self) -> int:
        return self.conv.cin

    @property
    def cout(self) -> int:
        return self.conv.cout

    def __call__(self, x: Tensor) -> Tensor:
        return conv_bn_silu(x, self)


def conv_bn_silu(x: Tensor, block: ConvBlock) -> Tensor:
    if x.shape[1] != block.cin:
        raise ValueError(f"ConvBlock expects {block.cin} input channels, got {x.shape[1]}")
    y = block.bn(block.conv(x))
    return T.silu(y) if block.act else y


def init_params(model: Module, seed: int) -> Module:
    """Deterministically (re)initialize every parameter and buffer of ``model``."""
    mods = list(model.named_modules())
    for prefix, mod in mods:
        mod.init_own(seed, prefix)
    for _, mod in mods:
        mod.post_init()
    return model


class ParamRegistry:
    """Ordered name -> tensor view over a model's learnable parameters."""

    def __init__(self, model: Module):
        self.items = list(model.named_parameters())
        names = [n for n, _ in self.items]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def count(self) -> int:
        return sum(p.size for _, p in self.items)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.items:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: u64 manifest length, JSON manifest, tensor blobs in manifest order
# ---------------------------------------------------------------------------
def save_checkpoint(path: str | Path, model: Module, meta: dict | None = None) -> None:
    entries = [(n, p.data) for n, p in model.named_parameters()]
    entries += list(model.named_buffers())
    manifest = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, arr in entries:
            fh.write(T.tensor_to_bytes(arr))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    try:
        (n,) = struct.unpack_from("<Q", buf, 0)
        manifest = json.loads(buf[8:8 + n])
        entries = manifest["tensors"]
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not a checkpoint ({exc})") from exc
    offset = 8 + n
    arrays = {}
    for entry in entries:
        try:
            arr, offset = T.tensor_from_bytes(buf, offset)
        except (struct.error, ValueError) as exc:
            raise ValueError(f"{path}: truncated tensor {entry.get('name')}") from exc
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint shape mismatch for {entry['name']}")
        arrays[entry["name"]] = arr
    return manifest, arrays


def load_state(model: Module, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name not in arrays:
            raise KeyError(f"checkpoint lacks parameter {name}")
        if p.shape != arrays[name].shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {arrays[name].shape}")
        p.data[...] = arrays[name]
    for name, buf in model.named_buffers():
        if name in arrays:
            buf[...] = arrays[name]
