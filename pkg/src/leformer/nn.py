"""Learnable layers with hierarchical, slash-separated parameter names."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, matmul


class ParamStore:
    """Ordered ``name -> tensor`` registry; the unit of checkpointing and optimisation."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def add(self, name: str, tensor: Tensor, learnable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.name = name
        tensor.requires_grad = learnable
        self._entries[name] = (tensor, learnable)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def entries(self):
        """Yield ``(name, tensor, learnable)`` in registration order."""
        for name, (t, learnable) in self._entries.items():
            yield name, t, learnable

    def learnable(self) -> list:
        return [(n, t) for n, t, l in self.entries() if l]

    def zero_grad(self) -> None:
        for _, t, _ in self.entries():
            t.grad = None

    def state_dict(self) -> dict:
        return {n: t.data.copy() for n, t, _ in self.entries()}

    def astype(self, dtype) -> None:
        for _, t, _ in self.entries():
            t.data = t.data.astype(dtype)
            t.grad = None


def _under(name: str, prefix: str | None) -> bool:
    if not prefix:
        return True
    prefix = prefix.rstrip("/")
    return name == prefix or name.startswith(prefix + "/")


def count_params(store: ParamStore, prefix: str | None = None) -> int:
    return sum(t.size for n, t, l in store.entries() if l and _under(n, prefix))


@dataclass(frozen=True)
class Initializer:
    """Seeded parameter initialisation.

    Each parameter draws from its own generator keyed on ``(seed, crc32(name))``,
    so values do not depend on construction order.
    """

    seed: int = 0

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])

    def kaiming_fan_out(self, name, shape, groups=1, dtype=np.float32):
        cout, _, kh, kw = shape
        fan_out = max(1, kh * kw * cout // groups)
        return self.rng(name).normal(0.0, math.sqrt(2.0 / fan_out), size=shape).astype(dtype)

    def trunc_normal(self, name, shape, std=0.02, dtype=np.float32):
        # resample until every draw lies within two standard deviations
        rng = self.rng(name)
        out = rng.normal(0.0, std, size=shape)
        bad = np.abs(out) > 2 * std
        while bad.any():
            out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > 2 * std
        return out.astype(dtype)

    @staticmethod
    def zeros(shape, dtype=np.float32):
        return np.zeros(shape, dtype=dtype)

    @staticmethod
    def ones(shape, dtype=np.float32):
        return np.ones(shape, dtype=dtype)


class Builder:
    """Carries the store, initializer, dtype and current name scope while layers are built."""

    def __init__(self, store: ParamStore | None = None, init: Initializer | None = None,
                 dtype=np.float32, prefix: str = ""):
        self.store = store if store is not None else ParamStore()
        self.init = init if init is not None else Initializer()
        self.dtype = np.dtype(dtype)
        self.prefix = prefix

    def scope(self, name: str) -> "Builder":
        return Builder(self.store, self.init, self.dtype, self.path(name))

    def path(self, name: str) -> str:
        return f"{self.prefix}/{name}" if self.prefix else name

    def param(self, name: str, data: np.ndarray) -> Tensor:
        return self.store.add(self.path(name), Tensor(data, dtype=self.dtype))


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """y = x W^T + b over the trailing axis."""

    def __init__(self, b: Builder, name: str, in_features: int, out_features: int, bias: bool = True):
        s = b.scope(name)
        self.in_features, self.out_features = in_features, out_features
        self.weight = s.param("weight", b.init.trunc_normal(s.path("weight"), (out_features, in_features),
                                                            dtype=b.dtype))
        self.bias = s.param("bias", Initializer.zeros((out_features,), b.dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects trailing dim {self.in_features}, got shape {x.shape}")
        y = matmul(x, self.weight.transpose(0, 1))
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, b: Builder, name: str, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1, bias: bool = True):
        if cin % groups or cout % groups:
            raise ShapeError(f"channels (in={cin}, out={cout}) not divisible by groups={groups}")
        s = b.scope(name)
        shape = (cout, cin // groups, kernel, kernel)
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.weight = s.param("weight", b.init.kaiming_fan_out(s.path("weight"), shape, groups, b.dtype))
        self.bias = s.param("bias", Initializer.zeros((cout,), b.dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class LayerNorm(Module):
    """Normalises the trailing axis (use on sequences, i.e. per token over channels)."""

    def __init__(self, b: Builder, name: str, dim: int, eps: float = 1e-6):
        s = b.scope(name)
        self.eps = eps
        self.weight = s.param("weight", Initializer.ones((dim,), b.dtype))
        self.bias = s.param("bias", Initializer.zeros((dim,), b.dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, 1, self.weight, self.bias, self.eps)


class DWSeparableConv(Module):
    """Depthwise KxK conv (groups = Cin) then pointwise 1x1 conv, both with bias."""

    def __init__(self, b: Builder, name: str, cin: int, cout: int, kernel: int, stride: int, padding: int):
        s = b.scope(name)
        self.depthwise = Conv2d(s, "depthwise", cin, cin, kernel, stride, padding, groups=cin)
        self.pointwise = Conv2d(s, "pointwise", cin, cout, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))
