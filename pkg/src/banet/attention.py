"""Channel attention: squeeze-excitation and its bridged generalization.

Both modules share the same generation stage (ReLU -> FC -> sigmoid). The
bridged variant squeezes several feature maps from earlier conv layers, each
through its own projection and batch norm, and sums them before generation.
With all bridge projections zeroed and every branch norm configured as the
identity, the bridged module degenerates exactly to squeeze-excitation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm, Module, kaiming_uniform
from .tensor import (ShapeError, Tensor, add, add_bias, apply_attention,
                     global_avg_pool, matmul, relu, sigmoid)

__all__ = [
    "SqueezeExcite", "BridgeAttention", "BridgeSourceConfig", "ConfigError",
    "apply_attention",
]


class ConfigError(ValueError):
    """Invalid attention/bridge configuration."""


def _generate(z: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return sigmoid(add_bias(matmul(relu(z), w2), b2))


class SqueezeExcite(Module):
    """Per-channel gate from globally pooled features: sigmoid(W2 relu(W1 gap(x)))."""

    def __init__(self, c: int, r: int = 16, *, rng: np.random.Generator, dtype):
        if c % r != 0:
            raise ConfigError(f"channel count {c} not divisible by reduction {r}")
        self.c = c
        self.r = r
        self.w1 = kaiming_uniform((c, c // r), c, rng, dtype)
        self.w2 = kaiming_uniform((c // r, c), c // r, rng, dtype)
        self.b2 = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def integrate(self, x: Tensor) -> Tensor:
        """Pooled features projected to the bottleneck width: gap(x) @ w1."""
        if x.data.ndim != 4 or x.shape[1] != self.c:
            raise ShapeError(f"integrate: expected B x {self.c} x H x W, got {x.shape}")
        return matmul(global_avg_pool(x), self.w1)

    def generate(self, z: Tensor) -> Tensor:
        """Bottleneck features to gates in (0, 1): sigmoid(relu(z) @ w2 + b2)."""
        return _generate(z, self.w2, self.b2)

    def attention(self, x: Tensor) -> Tensor:
        return self.generate(self.integrate(x))


class _Branch(Module):
    """One bridged input: its squeeze matrix (no bias) and dedicated norm."""

    def __init__(self, in_ch: int, width: int, *, rng, dtype):
        self.in_ch = in_ch
        self.w = kaiming_uniform((in_ch, width), in_ch, rng, dtype)
        self.norm = BatchNorm(width, dtype=dtype)


class BridgeAttention(Module):
    """Attention over the last conv output plus bridged earlier features.

    ``branch_channels`` lists the channel counts of the bridged feature maps
    in layer order; the final entry is the attended output itself.
    """

    def __init__(self, branch_channels: list[int], cn: int, r: int = 16, *,
                 rng: np.random.Generator, dtype):
        if cn % r != 0:
            raise ConfigError(f"channel count {cn} not divisible by reduction {r}")
        if not branch_channels or branch_channels[-1] != cn:
            raise ConfigError(
                f"last branch must match attended channels {cn}, got {branch_channels}")
        self.cn = cn
        self.r = r
        width = cn // r
        self.branches = [_Branch(ci, width, rng=rng, dtype=dtype)
                         for ci in branch_channels]
        self.w2 = kaiming_uniform((width, cn), width, rng, dtype)
        self.b2 = Tensor(np.zeros(cn, dtype=dtype), requires_grad=True)

    @property
    def branch_channels(self) -> list[int]:
        return [b.in_ch for b in self.branches]

    def integrate(self, features: list[Tensor], mode: str) -> Tensor:
        """Sum of normalized squeezed branches, in ascending layer order."""
        if len(features) != len(self.branches):
            raise ConfigError(
                f"expected {len(self.branches)} branch features, got {len(features)}")
        total = None
        for feat, branch in zip(features, self.branches):
            if feat.data.ndim != 4 or feat.shape[1] != branch.in_ch:
                raise ConfigError(
                    f"branch expects B x {branch.in_ch} x H x W, got {feat.shape}")
            s = branch.norm.forward(matmul(global_avg_pool(feat), branch.w), mode)
            total = s if total is None else add(total, s)
        return total

    def generate(self, z: Tensor) -> Tensor:
        return _generate(z, self.w2, self.b2)

    def attention(self, features: list[Tensor], mode: str) -> Tensor:
        return self.generate(self.integrate(features, mode))

    def squeezed_branches(self, features: list[Tensor], mode: str) -> list[Tensor]:
        """Per-branch normalized squeezed features (used by trace capture)."""
        if len(features) != len(self.branches):
            raise ConfigError(
                f"expected {len(self.branches)} branch features, got {len(features)}")
        return [branch.norm.forward(matmul(global_avg_pool(f), branch.w), mode)
                for f, branch in zip(features, self.branches)]

    def zero_bridges(self) -> None:
        """Zero every non-adjacent squeeze matrix and make all norms identity."""
        for branch in self.branches[:-1]:
            branch.w.data.fill(0.0)
        for branch in self.branches:
            branch.norm.set_identity()


@dataclass(frozen=True)
class BridgeSourceConfig:
    """Which earlier conv outputs inside the block feed the attention layer.

    The final conv output is always included implicitly. Sources are conv
    layer names such as "conv1"; they must lie strictly before the attention
    layer of the block they are attached to.
    """

    sources: frozenset = field(default_factory=frozenset)

    @staticmethod
    def parse(text: str) -> "BridgeSourceConfig":
        parts = [p.strip() for p in text.replace("&", "+").split("+") if p.strip()]
        return BridgeSourceConfig(frozenset(parts))

    @staticmethod
    def all_for(num_convs: int) -> "BridgeSourceConfig":
        return BridgeSourceConfig(frozenset(f"conv{i}" for i in range(1, num_convs)))

    def validate(self, num_convs: int) -> None:
        allowed = {f"conv{i}" for i in range(1, num_convs)}
        bad = self.sources - allowed
        if bad:
            raise ConfigError(
                f"bridge sources {sorted(bad)} invalid for a {num_convs}-conv block; "
                f"allowed: {sorted(allowed)}")

    def indices(self) -> list[int]:
        return sorted(int(s[4:]) for s in self.sources)

    def __str__(self) -> str:
        return "+".join(f"conv{i}" for i in self.indices()) or "none"
