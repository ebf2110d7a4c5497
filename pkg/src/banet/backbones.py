"""Residual networks with pluggable channel attention, plus cost accounting.

Blocks are classic residual units (two 3x3 convs, or a 1x1/3x3/1x1
bottleneck with the stride on the 3x3). Attention, when enabled, gates the
last conv's post-norm output before the residual add; the shortcut itself is
never rescaled. Bridged attention taps the post-activation outputs of the
selected earlier convs inside the same block.

Cost accounting is analytic (shape-only): one multiply-accumulate counts as
one op, and norm/activation/pool work is included per element.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .attention import BridgeAttention, BridgeSourceConfig, ConfigError, SqueezeExcite
from .nn import BatchNorm, Conv2d, Linear, Module
from .tensor import (Tensor, add, apply_attention, global_avg_pool, maxpool2d,
                     relu)

CHECKPOINT_MAGIC = b"BANET1"

ATTENTION_KINDS = ("none", "se", "ba")


class TraceEntry(NamedTuple):
    block_id: int
    branches: list
    omega: np.ndarray


# ---------------------------------------------------------------------------
# Specs


@dataclass
class BlockSpec:
    kind: str
    in_ch: int
    mid_ch: int
    out_ch: int
    stride: int = 1
    attention: str = "none"
    bridge_sources: BridgeSourceConfig = field(default_factory=BridgeSourceConfig)
    downsample: bool = False

    @property
    def num_convs(self) -> int:
        return 3 if self.kind == "bottleneck" else 2

    def validate(self) -> None:
        if self.kind not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if min(self.in_ch, self.mid_ch, self.out_ch) < 1:
            raise ConfigError("channel counts must be positive")
        if not self.downsample and (self.in_ch != self.out_ch or self.stride != 1):
            raise ConfigError(
                f"block {self.in_ch}->{self.out_ch} stride {self.stride} "
                "needs a projection shortcut")
        if self.attention == "ba":
            self.bridge_sources.validate(self.num_convs)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "in_ch": self.in_ch, "mid_ch": self.mid_ch,
            "out_ch": self.out_ch, "stride": self.stride,
            "attention": self.attention,
            "bridge_sources": [f"conv{i}" for i in self.bridge_sources.indices()],
            "downsample": self.downsample,
        }

    @staticmethod
    def from_dict(d: dict) -> "BlockSpec":
        return BlockSpec(
            kind=d["kind"], in_ch=d["in_ch"], mid_ch=d["mid_ch"],
            out_ch=d["out_ch"], stride=d.get("stride", 1),
            attention=d.get("attention", "none"),
            bridge_sources=BridgeSourceConfig(frozenset(d.get("bridge_sources", []))),
            downsample=d.get("downsample", False),
        )


@dataclass
class StemSpec:
    out_ch: int
    kernel: int
    stride: int
    padding: int
    maxpool: bool = False

    def to_dict(self) -> dict:
        return {"out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding,
                "maxpool": self.maxpool}

    @staticmethod
    def from_dict(d: dict) -> "StemSpec":
        return StemSpec(d["out_ch"], d["kernel"], d["stride"], d["padding"],
                        d.get("maxpool", False))


@dataclass
class StageSpec:
    count: int
    template: BlockSpec


@dataclass
class ArchSpec:
    name: str
    stem: StemSpec
    stages: list[StageSpec]
    num_classes: int
    input_shape: tuple

    def validate(self) -> None:
        prev = self.stem.out_ch
        for stage in self.stages:
            if stage.count < 1:
                raise ConfigError("stage needs at least one block")
            if stage.template.in_ch != prev:
                raise ConfigError(
                    f"channel chain broken: stage expects in_ch {stage.template.in_ch}, "
                    f"previous produces {prev}")
            prev = stage.template.out_ch

    def block_specs(self) -> list[BlockSpec]:
        """Expand stage templates into the concrete per-block spec list."""
        specs = []
        for stage in self.stages:
            t = stage.template
            for i in range(stage.count):
                in_ch = t.in_ch if i == 0 else t.out_ch
                stride = t.stride if i == 0 else 1
                downsample = (in_ch != t.out_ch or stride != 1)
                specs.append(BlockSpec(
                    kind=t.kind, in_ch=in_ch, mid_ch=t.mid_ch, out_ch=t.out_ch,
                    stride=stride, attention=t.attention,
                    bridge_sources=t.bridge_sources, downsample=downsample))
        return specs

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "stem": self.stem.to_dict(),
            "stages": [{"count": s.count, "template": s.template.to_dict()}
                       for s in self.stages],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        arch = ArchSpec(
            name=d["name"],
            stem=StemSpec.from_dict(d["stem"]),
            stages=[StageSpec(s["count"], BlockSpec.from_dict(s["template"]))
                    for s in d["stages"]],
            num_classes=d["num_classes"],
            input_shape=tuple(d["input_shape"]),
        )
        arch.validate()
        return arch


def arch_from_json(path: str) -> ArchSpec:
    with open(path, "r", encoding="utf-8") as f:
        return ArchSpec.from_dict(json.load(f))


def arch_to_json(arch: ArchSpec, path: str) -> None:
    _atomic_write_bytes(path, json.dumps(arch.to_dict(), indent=2).encode())


# ---------------------------------------------------------------------------
# Built-in architectures


def resnet20(num_classes: int = 10) -> ArchSpec:
    def stage(in_ch, out_ch, stride):
        return StageSpec(3, BlockSpec("basic", in_ch, out_ch, out_ch, stride))
    return ArchSpec(
        name="resnet20",
        stem=StemSpec(16, 3, 1, 1, maxpool=False),
        stages=[stage(16, 16, 1), stage(16, 32, 2), stage(32, 64, 2)],
        num_classes=num_classes,
        input_shape=(3, 32, 32),
    )


def _imagenet_resnet(name: str, counts: list[int], num_classes: int) -> ArchSpec:
    widths = [(64, 64, 256, 1), (256, 128, 512, 2),
              (512, 256, 1024, 2), (1024, 512, 2048, 2)]
    stages = [StageSpec(c, BlockSpec("bottleneck", i, m, o, s))
              for c, (i, m, o, s) in zip(counts, widths)]
    return ArchSpec(name=name, stem=StemSpec(64, 7, 2, 3, maxpool=True),
                    stages=stages, num_classes=num_classes,
                    input_shape=(3, 224, 224))


def resnet50(num_classes: int = 1000) -> ArchSpec:
    return _imagenet_resnet("resnet50", [3, 4, 6, 3], num_classes)


def resnet101(num_classes: int = 1000) -> ArchSpec:
    return _imagenet_resnet("resnet101", [3, 4, 23, 3], num_classes)


BUILTIN_ARCHS = {"resnet20": resnet20, "resnet50": resnet50, "resnet101": resnet101}


def resolve_arch(name_or_path: str) -> ArchSpec:
    if name_or_path in BUILTIN_ARCHS:
        return BUILTIN_ARCHS[name_or_path]()
    if os.path.exists(name_or_path):
        return arch_from_json(name_or_path)
    raise ConfigError(f"unknown architecture {name_or_path!r}; "
                      f"builtins: {sorted(BUILTIN_ARCHS)}")


# ---------------------------------------------------------------------------
# Blocks and networks


class ResidualBlock(Module):
    def __init__(self, spec: BlockSpec, reduction: int = 16, *,
                 rng: np.random.Generator, dtype):
        spec.validate()
        self.spec = spec
        s, dtype_ = spec, dtype
        if s.kind == "bottleneck":
            self.conv1 = Conv2d(s.in_ch, s.mid_ch, 1, rng=rng, dtype=dtype_)
            self.bn1 = BatchNorm(s.mid_ch, dtype=dtype_)
            self.conv2 = Conv2d(s.mid_ch, s.mid_ch, 3, stride=s.stride, padding=1,
                                rng=rng, dtype=dtype_)
            self.bn2 = BatchNorm(s.mid_ch, dtype=dtype_)
            self.conv3 = Conv2d(s.mid_ch, s.out_ch, 1, rng=rng, dtype=dtype_)
            self.bn3 = BatchNorm(s.out_ch, dtype=dtype_)
        else:
            self.conv1 = Conv2d(s.in_ch, s.mid_ch, 3, stride=s.stride, padding=1,
                                rng=rng, dtype=dtype_)
            self.bn1 = BatchNorm(s.mid_ch, dtype=dtype_)
            self.conv2 = Conv2d(s.mid_ch, s.out_ch, 3, padding=1, rng=rng, dtype=dtype_)
            self.bn2 = BatchNorm(s.out_ch, dtype=dtype_)
        if s.downsample:
            self.ds_conv = Conv2d(s.in_ch, s.out_ch, 1, stride=s.stride,
                                  rng=rng, dtype=dtype_)
            self.ds_bn = BatchNorm(s.out_ch, dtype=dtype_)
        if s.attention == "se":
            self.att = SqueezeExcite(s.out_ch, reduction, rng=rng, dtype=dtype_)
        elif s.attention == "ba":
            chans = [self._tap_channels(i) for i in s.bridge_sources.indices()]
            self.att = BridgeAttention(chans + [s.out_ch], s.out_ch, reduction,
                                       rng=rng, dtype=dtype_)

    def _tap_channels(self, conv_index: int) -> int:
        return self.spec.mid_ch  # conv1 and conv2 taps are both mid-width

    def forward(self, x: Tensor, mode: str, trace: Optional[list] = None,
                block_id: int = 0) -> Tensor:
        s = self.spec
        taps = {}
        h = relu(self.bn1.forward(self.conv1.forward(x), mode))
        taps[1] = h
        if s.kind == "bottleneck":
            h = relu(self.bn2.forward(self.conv2.forward(h), mode))
            taps[2] = h
            out = self.bn3.forward(self.conv3.forward(h), mode)
        else:
            out = self.bn2.forward(self.conv2.forward(h), mode)

        if s.attention == "se":
            z = self.att.integrate(out)
            omega = self.att.generate(z)
            if trace is not None:
                trace.append(TraceEntry(block_id, [z.data.copy()], omega.data.copy()))
            out = apply_attention(out, omega)
        elif s.attention == "ba":
            feats = [taps[i] for i in s.bridge_sources.indices()] + [out]
            parts = self.att.squeezed_branches(feats, mode)
            total = parts[0]
            for p in parts[1:]:
                total = add(total, p)
            omega = self.att.generate(total)
            if trace is not None:
                trace.append(TraceEntry(block_id, [p.data.copy() for p in parts],
                                        omega.data.copy()))
            out = apply_attention(out, omega)

        shortcut = x
        if s.downsample:
            shortcut = self.ds_bn.forward(self.ds_conv.forward(x), mode)
        return relu(add(out, shortcut))


def build_block(spec: BlockSpec, reduction: int = 16, seed: int = 0,
                dtype=np.float32) -> ResidualBlock:
    return ResidualBlock(spec, reduction, rng=np.random.default_rng(seed), dtype=dtype)


class Network(Module):
    def __init__(self, arch: ArchSpec, specs: list[BlockSpec], reduction: int, *,
                 rng: np.random.Generator, dtype):
        self.arch = arch
        self.dtype = dtype
        c_in = arch.input_shape[0]
        self.stem_conv = Conv2d(c_in, arch.stem.out_ch, arch.stem.kernel,
                                stride=arch.stem.stride, padding=arch.stem.padding,
                                rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(arch.stem.out_ch, dtype=dtype)
        self.blocks = [ResidualBlock(s, reduction, rng=rng, dtype=dtype) for s in specs]
        self.head = Linear(specs[-1].out_ch, arch.num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, mode: str = "eval",
                trace: Optional[list] = None) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.arch.input_shape[0]:
            raise ConfigError(
                f"expected input B x {self.arch.input_shape[0]} x H x W, got {x.shape}")
        h = relu(self.stem_bn.forward(self.stem_conv.forward(x), mode))
        if self.arch.stem.maxpool:
            h = maxpool2d(h, 3, 2, 1)
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h, mode, trace=trace, block_id=i)
        return self.head.forward(global_avg_pool(h))

    def attention_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.spec.attention != "none"]


def build_network(arch: ArchSpec, attention: Optional[str] = None,
                  bridge_sources: Optional[BridgeSourceConfig] = None,
                  reduction: int = 16, seed: int = 0,
                  dtype=np.float32) -> Network:
    """Materialize a network, optionally overriding every block's attention."""
    arch.validate()
    specs = arch.block_specs()
    if attention is not None:
        if attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {attention!r}")
        for s in specs:
            s.attention = attention
            if attention == "ba":
                s.bridge_sources = (bridge_sources if bridge_sources is not None
                                    else BridgeSourceConfig.all_for(s.num_convs))
                s.bridge_sources.validate(s.num_convs)
            else:
                s.bridge_sources = BridgeSourceConfig()
    rng = np.random.default_rng(seed)
    return Network(arch, specs, reduction, rng=rng, dtype=dtype)


# ---------------------------------------------------------------------------
# Cost accounting


def count_params(net: Network) -> int:
    """Exact count of trainable scalars."""
    return sum(p.tensor.data.size for p in net.parameters() if p.tensor.requires_grad)


def _conv_out(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def _se_flops(c: int, r: int, h: int, w: int) -> int:
    gap = c * h * w
    fc = c * (c // r) + (c // r) + (c // r) * c + c
    return gap + fc + c + c * h * w  # + sigmoid + rescale


def _ba_flops(branch_channels: list[int], branch_hw: list[tuple], cn: int, r: int,
              h: int, w: int) -> int:
    width = cn // r
    total = 0
    for ci, (bh, bw) in zip(branch_channels, branch_hw):
        total += ci * bh * bw          # gap
        total += ci * width            # squeeze matrix
        total += 2 * width             # branch norm (scale + shift)
    total += (len(branch_channels) - 1) * width   # branch summation
    total += width + width * cn + cn              # relu + fc + bias
    total += cn + cn * h * w                      # sigmoid + rescale
    return total


def count_flops(net: Network, input_shape: Optional[tuple] = None) -> int:
    """Analytic op count for one forward pass, one MAC counted as one op."""
    arch = net.arch
    if input_shape is None:
        input_shape = (1,) + tuple(arch.input_shape)
    b, c, h, w = input_shape
    total = 0

    stem = arch.stem
    h = _conv_out(h, stem.kernel, stem.stride, stem.padding)
    w = _conv_out(w, stem.kernel, stem.stride, stem.padding)
    total += stem.out_ch * c * stem.kernel ** 2 * h * w
    total += 3 * stem.out_ch * h * w  # norm (2/elem) + relu
    if stem.maxpool:
        h = _conv_out(h, 3, 2, 1)
        w = _conv_out(w, 3, 2, 1)
        total += 8 * stem.out_ch * h * w  # 3x3 window, k*k-1 compares per output

    for blk in net.blocks:
        s = blk.spec
        if s.kind == "bottleneck":
            convs = [(s.in_ch, s.mid_ch, 1, 1, 0), (s.mid_ch, s.mid_ch, 3, s.stride, 1),
                     (s.mid_ch, s.out_ch, 1, 1, 0)]
        else:
            convs = [(s.in_ch, s.mid_ch, 3, s.stride, 1), (s.mid_ch, s.out_ch, 3, 1, 1)]
        tap_hw = []
        ch, cw = h, w
        for i, (ci, co, k, stride, pad) in enumerate(convs):
            ch = _conv_out(ch, k, stride, pad)
            cw = _conv_out(cw, k, stride, pad)
            total += co * ci * k * k * ch * cw   # conv MACs
            total += 2 * co * ch * cw            # norm
            if i < len(convs) - 1:
                total += co * ch * cw            # inner relu
            tap_hw.append((ch, cw))
        if s.downsample:
            dh = _conv_out(h, 1, s.stride, 0)
            dw = _conv_out(w, 1, s.stride, 0)
            total += s.out_ch * s.in_ch * dh * dw + 2 * s.out_ch * dh * dw
        h, w = ch, cw
        if s.attention == "se":
            total += _se_flops(s.out_ch, blk.att.r, h, w)
        elif s.attention == "ba":
            idx = s.bridge_sources.indices()
            chans = [blk._tap_channels(i) for i in idx] + [s.out_ch]
            hws = [tap_hw[i - 1] for i in idx] + [tap_hw[-1]]
            total += _ba_flops(chans, hws, s.out_ch, blk.att.r, h, w)
        total += 2 * s.out_ch * h * w  # residual add + final relu

    total += net.blocks[-1].spec.out_ch * h * w                   # global pool
    total += net.head.in_features * net.head.out_features + net.head.out_features
    return total * b


# ---------------------------------------------------------------------------
# Checkpoints


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _state_entries(net: Network):
    for p in net.named_parameters():
        yield p.name, p.tensor.data
    for name, arr in net.named_buffers():
        yield name, arr


def save_checkpoint(net: Network, path: str) -> None:
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in _state_entries(net):
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(net: Network, path: str) -> None:
    """Load values into an already-built network; structure must match exactly."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ConfigError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    for name, arr in _state_entries(net):
        (nlen,) = struct.unpack("<I", take(4))
        fname = take(nlen).decode("utf-8")
        if fname != name:
            raise ConfigError(
                f"checkpoint mismatch at parameter {name!r}: file has {fname!r}")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tuple(shape) != arr.shape:
            raise ConfigError(
                f"checkpoint mismatch at parameter {name!r}: "
                f"file shape {tuple(shape)}, expected {arr.shape}")
        values = np.frombuffer(take(4 * arr.size), dtype="<f4").reshape(shape)
        arr[...] = values.astype(arr.dtype)
    if off != len(blob):
        raise ConfigError(f"{path}: trailing data after last parameter")
