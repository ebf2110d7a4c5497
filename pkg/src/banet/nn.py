"""Layer plumbing: parameter registry, conv/norm/linear building blocks.

Modules discover parameters and buffers by walking attributes in definition
order, so the registry (and therefore the checkpoint layout) is stable for a
given architecture. Weight decay applies to matrices named like weights;
biases and norm parameters are exempt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import RunningStats, Tensor, add_bias, batchnorm, conv2d, matmul

# leaf names that take weight decay during SGD
_DECAYED = ("w", "w1", "w2", "weight")


@dataclass
class ParamInfo:
    name: str
    tensor: Tensor
    decay: bool


class Module:
    """Minimal container; subclasses assign Tensor/Module/list attributes."""

    def _register_buffer(self, name: str, array: np.ndarray) -> None:
        if not hasattr(self, "_buffers"):
            object.__setattr__(self, "_buffers", {})
        self._buffers[name] = array

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield ParamInfo(full, value, value.requires_grad and name in _DECAYED)
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield ParamInfo(f"{full}.{i}", item,
                                        item.requires_grad and name in _DECAYED)

    def named_buffers(self, prefix: str = ""):
        buffers = getattr(self, "_buffers", None)
        if buffers:
            for name, arr in buffers.items():
                yield f"{prefix}{name}", arr
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[ParamInfo]:
        return list(self.named_parameters())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()


def kaiming_uniform(shape: tuple, fan_in: int, rng: np.random.Generator, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, *, rng: np.random.Generator, dtype):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.w = kaiming_uniform((out_ch, in_ch, kernel, kernel),
                                 in_ch * kernel * kernel, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.stride, self.padding)


class BatchNorm(Module):
    """Affine batch norm over rank-2 or rank-4 inputs with running stats."""

    def __init__(self, num_features: int, *, dtype, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.stats = RunningStats(num_features, dtype=dtype)
        self._register_buffer("running_mean", self.stats.mean)
        self._register_buffer("running_var", self.stats.var)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.stats, mode,
                         eps=self.eps, momentum=self.momentum)

    def set_identity(self) -> None:
        """Configure as an exact no-op in eval mode (used by degeneration tests)."""
        self.gamma.data.fill(1.0)
        self.beta.data.fill(0.0)
        self.stats.mean.fill(0.0)
        self.stats.var.fill(1.0)
        self.eps = 0.0


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.w = kaiming_uniform((in_features, out_features), in_features, rng, dtype)
        self.b = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        if self.b is not None:
            out = add_bias(out, self.b)
        return out
