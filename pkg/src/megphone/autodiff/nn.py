"""Minimal module system on top of the autodiff tensors."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ConfigurationError, NumericFault
from . import ops
from .taps import current_registry
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    """Zero-mean normal init with std ``gain / sqrt(fan_in)``."""
    return (rng.standard_normal(shape) * (gain / math.sqrt(fan_in))).astype(np.float32)


class Module:
    """Base class: tracks parameters, buffers and child modules by attribute name.

    When called, a module whose subtree owns trainable parameters checks its
    output for non-finite values and, if a :class:`TapRegistry` is active,
    records the output under its dotted name.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_name", "")

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._parameters[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if self._name and isinstance(out, Tensor) and self.has_parameters():
            if not np.isfinite(out.data).all():
                raise NumericFault(f"non-finite activation in sublayer {self._name!r}")
            registry = current_registry()
            if registry is not None:
                registry.record(self._name, out)
        return out

    # -- traversal -----------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, module in self.named_modules(prefix):
            for key, p in module._parameters.items():
                yield (f"{name}.{key}" if name else key), p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, module in self.named_modules():
            for key, b in module._buffers.items():
                yield (f"{name}.{key}" if name else key), b

    def has_parameters(self) -> bool:
        if self._parameters:
            return True
        return any(child.has_parameters() for child in self._modules.values())

    def assign_names(self) -> None:
        """Stamp every submodule with its dotted path; the root stays unnamed."""
        for name, module in self.named_modules():
            object.__setattr__(module, "_name", name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- mode and state --------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            if value.shape != own[name].shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {own[name].shape}")
            if name in params:
                params[name].data = np.array(value, dtype=params[name].dtype)
            else:
                own[name][...] = value

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 is used by oracle tests)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, module in self.named_modules():
            for key, buf in list(module._buffers.items()):
                module.register_buffer(key, buf.astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: List[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- layers ---------------------------------------------------------------------


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=None, bias=True, gain=math.sqrt(2.0)):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_ch * kernel_size
        self.weight = Parameter(kaiming_normal(rng, (out_ch, in_ch, kernel_size), fan_in, gain))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, padding=None, bias=True, gain=math.sqrt(2.0)):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_ch * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(rng, (out_ch, in_ch, kernel_size, kernel_size), fan_in, gain))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, gain=1.0, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((out_dim, in_dim), dtype=np.float32)
        else:
            w = kaiming_normal(rng, (out_dim, in_dim), in_dim, gain)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=ops.NORM_EPS):
        super().__init__()
        if channels % groups:
            raise ConfigurationError(f"channels {channels} not divisible by groups {groups}")
        self.groups, self.eps = groups, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return ops.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    """Normalizes over one feature axis: 1 for ``[B, C, ...]`` maps, -1 for sequences."""

    def __init__(self, channels, axis=-1, eps=ops.NORM_EPS):
        super().__init__()
        self.axis, self.eps = axis, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.axis, self.eps)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=ops.NORM_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return ops.batch_norm(
            x, self.running_mean, self.running_var, self.weight, self.bias, self.training, self.momentum, self.eps
        )


class InstanceNorm(Module):
    """Fixed gamma=1, beta=0; no trainable state."""

    def __init__(self, eps=ops.NORM_EPS):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return ops.instance_norm(x, self.eps)


def make_norm(kind: str, channels: int, groups: int = 8, axis: int = 1) -> Optional[Module]:
    if kind == "none":
        return None
    if kind == "group":
        return GroupNorm(math.gcd(groups, channels), channels)
    if kind == "layer":
        return LayerNorm(channels, axis=axis)
    if kind == "batch":
        return BatchNorm(channels)
    if kind == "instance":
        return InstanceNorm()
    raise ConfigurationError(f"unknown norm kind {kind!r}")


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x):
        B, T, D = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        ctx, weights = ops.scaled_dot_product_attention(q, k, v)
        self.last_weights = weights.data
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(B, T, D))


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, gain=math.sqrt(2.0))
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(self.fc1(x).relu())


class TransformerEncoderLayer(Module):
    """Pre-norm encoder layer: ``x + MHA(LN(x))`` then ``x + FF(LN(x))``."""

    def __init__(self, dim, heads, rng, ff_mult=2):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TransformerEncoder(Module):
    def __init__(self, dim, layers, heads, rng, ff_mult=2):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by {heads} heads")
        self.layers = ModuleList(TransformerEncoderLayer(dim, heads, rng, ff_mult) for _ in range(layers))
        self.norm = LayerNorm(dim)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


def transformer_encoder(x: Tensor, layers: int, heads: int, rng=None) -> Tensor:
    """Functional convenience: build a fresh encoder for ``x``'s width and apply it."""
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = TransformerEncoder(x.shape[-1], layers, heads, rng)
    return enc(x)
