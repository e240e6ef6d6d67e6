"""Lightweight module system: parameter containers, init, common layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor


def _walk_items(name: str, val) -> "Iterator[tuple[str, object]]":
    """Yield (dotted name, item) for Parameters/Modules in val, recursing
    through arbitrarily nested lists and tuples."""
    if isinstance(val, (Parameter, Module)):
        yield name, val
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_items(f"{name}.{i}", item)


class Module:
    """Base class; discovers parameters and buffers by walking attributes."""

    training: bool = False

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            for name, item in _walk_items(key, val):
                if isinstance(item, Module):
                    yield name, item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            for name, item in _walk_items(f"{prefix}{key}", val):
                if isinstance(item, Parameter):
                    yield name, item
                else:
                    yield from item.named_parameters(f"{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        own = getattr(self, "_buffers", None)
        if own:
            for key, val in own.items():
                yield f"{prefix}{key}", val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def register_buffer(self, name: str, value: np.ndarray):
        if not hasattr(self, "_buffers"):
            self._buffers = {}
        self._buffers[name] = np.asarray(value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, flag: bool = True):
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[f"buffer:{name}"] = b.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        want = set(own) | {f"buffer:{n}" for n in own_buffers}
        missing = want - set(state)
        unexpected = set(state) - want
        if strict and (missing or unexpected):
            raise KeyError(
                f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.data.shape:
                    raise ValueError(
                        f"parameter {name}: checkpoint shape {arr.shape} != model {p.data.shape}"
                    )
                p.data = arr.astype(p.data.dtype, copy=True)
        self._load_buffers(state, "")

    def _load_buffers(self, state: dict, prefix: str):
        own = getattr(self, "_buffers", None)
        if own:
            for key in list(own):
                full = f"buffer:{prefix}{key}"
                if full in state:
                    own[key] = np.asarray(state[full]).astype(own[key].dtype, copy=True)
        for key, child in self._children():
            child._load_buffers(state, f"{prefix}{key}.")

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for mod in self._modules_recursive():
            bufs = getattr(mod, "_buffers", None)
            if bufs:
                for key in bufs:
                    bufs[key] = bufs[key].astype(dtype)
        return self

    def _modules_recursive(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child._modules_recursive()


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def xavier_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=True, init="he"):
        self.stride = stride
        self.padding = padding
        fan_in = cin * k * k
        if init == "he":
            w = he_init(rng, (cout, cin, k, k), fan_in)
        else:  # variance-preserving, for convs not followed by a ReLU
            w = xavier_init(rng, (cout, cin, k, k), fan_in, cout * k * k)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvRect(Module):
    """Convolution with a rectangular kernel, e.g. 1x5 or 5x1."""

    def __init__(self, cin, cout, kh, kw, rng, padding=(0, 0), bias=True):
        self.padding = padding
        self.weight = Parameter(he_init(rng, (cout, cin, kh, kw), cin * kh * kw))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def __call__(self, x) -> Tensor:
        ph, pw = self.padding
        xt = ops.astensor(x)
        if ph == pw:
            return ops.conv2d(xt, self.weight, self.bias, stride=1, padding=ph)
        padded = _pad_hw(xt, ph, pw)
        return ops.conv2d(padded, self.weight, self.bias, stride=1, padding=0)


def _pad_hw(x: Tensor, ph: int, pw: int) -> Tensor:
    """Zero-pad (C,H,W) by (ph, pw) using differentiable concat."""
    c, h, w = x.shape
    if ph:
        zh = Tensor(np.zeros((c, ph, w), dtype=x.dtype))
        x = ops.concat([zh, x, zh], axis=1)
        h = h + 2 * ph
    if pw:
        zw = Tensor(np.zeros((c, h, pw), dtype=x.dtype))
        x = ops.concat([zw, x, zw], axis=2)
    return x


class DWConv2d(Module):
    def __init__(self, c, k, rng, padding=1, bias=True):
        self.padding = padding
        self.weight = Parameter(he_init(rng, (c, k, k), k * k))
        self.bias = Parameter(np.zeros(c)) if bias else None

    def __call__(self, x) -> Tensor:
        return ops.dwconv2d(x, self.weight, self.bias, padding=self.padding)


class Linear(Module):
    """Token-wise affine map for (N, din) -> (N, dout)."""

    def __init__(self, din, dout, rng, bias=True):
        self.weight = Parameter(xavier_init(rng, (din, dout), din, dout))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta)


class ChannelNorm2d(Module):
    def __init__(self, c):
        self.gamma = Parameter(np.ones((c, 1, 1)))
        self.beta = Parameter(np.zeros((c, 1, 1)))

    def __call__(self, x) -> Tensor:
        return ops.channel_norm2d(x, self.gamma, self.beta)


class RunningChannelNorm(Module):
    """Per-channel normalization with running statistics.

    Training forwards normalize by the sample's own spatial statistics and
    update the running estimates; eval forwards use the frozen estimates,
    which keeps the layer a fixed per-channel affine map (and therefore
    spatially local).
    """

    def __init__(self, c, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones((c, 1, 1)))
        self.beta = Parameter(np.zeros((c, 1, 1)))
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def __call__(self, x) -> Tensor:
        xt = ops.astensor(x)
        if self.training:
            stats = xt.data.reshape(xt.shape[0], -1)
            mu = stats.mean(axis=1)
            var = stats.var(axis=1)
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var
            return ops.channel_norm2d(xt, self.gamma, self.beta, eps=self.eps)
        rm = self._buffers["running_mean"][:, None, None]
        inv = 1.0 / np.sqrt(self._buffers["running_var"][:, None, None] + self.eps)
        xn = ops.mul(ops.sub(xt, rm.astype(xt.dtype)), inv.astype(xt.dtype))
        return ops.add(ops.mul(xn, self.gamma), self.beta)


class ResidualBlock(Module):
    """Two 3x3 convs with a ReLU joint and an identity or 1x1 skip."""

    def __init__(self, cin, cout, rng, stride=1):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        # the second conv feeds an addition, not a ReLU; keep its variance
        # neutral so stacked blocks do not blow up the activation scale
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1, init="xavier")
        if stride != 1 or cin != cout:
            self.skip = Conv2d(cin, cout, 1, rng, stride=stride, padding=0)
        else:
            self.skip = None

    def __call__(self, x) -> Tensor:
        y = ops.relu(self.conv1(x))
        y = self.conv2(y)
        s = x if self.skip is None else self.skip(x)
        return ops.relu(ops.add(y, s))
