"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every primitive records onto a global tape when gradients are enabled and at
least one input requires them. ``backward`` replays the tape in reverse
record order, which is a valid reverse-topological order because records are
appended in execution order. Gradients accumulate into ``Tensor.grad`` for
every tensor that requires them; repeated backward calls keep accumulating
until the grads are zeroed.

Data lives in row-major numpy arrays. Tests run in float64; training
typically runs in float32. Primitives never mix dtypes silently.
"""
from __future__ import annotations

import ctypes
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float64


def enable_malloc_reuse() -> bool:
    """Keep large freed buffers on the heap instead of returning them to the OS.

    glibc serves big allocations via mmap and unmaps them on free, so a
    training step pays page-fault costs for every large temporary. Raising the
    mmap threshold makes freed blocks reusable and speeds training severalfold
    at the cost of a higher resident set. No-op (returns False) off glibc.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_trim_threshold, m_mmap_threshold = -1, -3
        ok = libc.mallopt(m_mmap_threshold, 1 << 30)
        ok &= libc.mallopt(m_trim_threshold, 0x7FFFFFFF)
        return bool(ok)
    except OSError:
        return False


class ShapeError(ValueError):
    """Operand shapes or ranks violate an operation's contract."""


class BatchSizeError(ValueError):
    """Batch too small for an operation (train-mode batch norm needs B >= 2)."""


# ---------------------------------------------------------------------------
# Tape


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self._records: list[TapeRecord] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> Sequence[TapeRecord]:
        return tuple(self._records)

    def append(self, record: TapeRecord) -> None:
        self._records.append(record)

    def reset(self) -> None:
        self._records.clear()


_TAPE = Tape()


def tape() -> Tape:
    return _TAPE


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _TAPE.enabled
        _TAPE.enabled = False
        return self

    def __exit__(self, *exc):
        _TAPE.enabled = self._prev
        return False


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        """Gradient accumulator; present iff requires_grad."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def accumulate_grad(self, value: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += value

    def _adopt_grad(self, value: np.ndarray, claimed: set) -> None:
        # Take ownership of a freshly computed gradient array when possible;
        # copy when it is a view, broadcast, or already claimed by another
        # tensor (e.g. `add` hands the same upstream array to both inputs).
        if not self.requires_grad:
            return
        if self._grad is not None:
            self._grad += value
            return
        vid = id(value)
        if (vid in claimed or not value.flags.owndata
                or value.shape != self.data.shape or value.dtype != self.data.dtype):
            self._grad = np.array(value, dtype=self.data.dtype)
        else:
            self._grad = value
            claimed.add(vid)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.data.dtype}; cast explicitly")


def _result(op: str, inputs: tuple, out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    recording = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=recording)
    if recording:
        _TAPE.append(TapeRecord(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into every requires_grad tensor reachable from loss."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    # id -> (tensor, grad); fresh per call so repeated calls accumulate cleanly
    scratch: dict[int, list] = {id(loss): [loss, np.ones((), dtype=loss.dtype)]}
    for rec in reversed(_TAPE._records):
        entry = scratch.get(id(rec.output))
        if entry is None:
            continue
        grads = rec.backward_fn(entry[1])
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            slot = scratch.get(id(t))
            if slot is None:
                scratch[id(t)] = [t, g]
            else:
                slot[1] = slot[1] + g
    claimed: set = set()
    for t, g in scratch.values():
        t._adopt_grad(g, claimed)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    _check_same_dtype(a, b)
    return _result("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (B, N) + (N,)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: got {x.shape} and {b.shape}")
    _check_same_dtype(x, b)
    return _result("add_bias", (x, b), x.data + b.data,
                   lambda g: (g, g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data
    return _result("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    s = x.data.dtype.type(s)
    return _result("scale", (x,), x.data * s, lambda g: (g * s,))


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(x.data, g),)
    return _result("sum_all", (x,), x.data.sum(), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum (not where) so that NaN propagates instead of being zeroed
    return _result("relu", (x,), np.maximum(x.data, 0.0),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output clamped into the open unit interval.

    exp only ever sees a nonpositive argument. At extreme saturation the
    rounded result would hit exactly 0 or 1, so it is nudged one ulp inward
    to keep downstream strict range invariants valid.
    """
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    info = np.finfo(d.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", (x,), out, bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return (ga, gb)

    return _result("matmul", (a, b), ad @ bd, bwd)


# ---------------------------------------------------------------------------
# Convolution

# When enabled, the forward pass keeps its patch matrix alive for the weight
# gradient instead of regathering it. Costs memory proportional to
# B*Ho*Wo*k*k*C per conv; worth it on training-sized workloads.
_CACHE_COLS = True


def set_col_cache(enabled: bool) -> None:
    global _CACHE_COLS
    _CACHE_COLS = bool(enabled)


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _gather_col(xt: np.ndarray, Ho: int, Wo: int, k: int, stride: int,
                padding: int) -> np.ndarray:
    B, _, _, C = xt.shape
    col = np.empty((B, Ho, Wo, k, k, C), dtype=xt.dtype)
    _kernels.im2col(xt, col, stride, padding)
    return col


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights (no kernel flip)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Ci}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
    k = kh
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} larger than padded input "
            f"{H + 2 * padding}x{W + 2 * padding}")
    _check_same_dtype(x, w)
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1

    xt = _to_nhwc(x.data)
    col = _gather_col(xt, Ho, Wo, k, stride, padding)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(k * k * C, Co)
    y2 = col.reshape(B * Ho * Wo, k * k * C) @ wmat
    out = _to_nchw(y2.reshape(B, Ho, Wo, Co))

    saved_col = col if _CACHE_COLS else None
    del col

    def bwd(g):
        gt = _to_nhwc(g).reshape(B * Ho * Wo, Co)
        gw = None
        if w.requires_grad:
            c = saved_col if saved_col is not None else _gather_col(
                xt, Ho, Wo, k, stride, padding)
            dwmat = c.reshape(B * Ho * Wo, k * k * C).T @ gt
            gw = np.ascontiguousarray(
                dwmat.reshape(k, k, C, Co).transpose(3, 2, 0, 1))
        gx = None
        if x.requires_grad:
            dcol = (gt @ wmat.T).reshape(B, Ho, Wo, k, k, C)
            dxt = np.zeros_like(xt)
            _kernels.col2im(dcol, dxt, stride, padding)
            gx = _to_nchw(dxt)
        return (gx, gw)

    return _result("conv2d", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# Pooling


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs rank-4 input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (H * W)

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (B, C, H, W)).copy(),)

    return _result("global_avg_pool", (x,), out, bwd)


def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d needs rank-4 input, got {x.shape}")
    B, C, H, W = x.shape
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ShapeError(f"maxpool2d: window {k} larger than padded input")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    neg = np.finfo(x.dtype).min
    if padding:
        xp = np.full((B, C, H + 2 * padding, W + 2 * padding), neg, dtype=x.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,k,k)
    flat = windows.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
        bi, ci, ii, ji = np.indices((B, C, Ho, Wo))
        rows = ii * stride + arg // k
        cols = ji * stride + arg % k
        np.add.at(dxp, (bi, ci, rows, cols), g)
        if padding:
            dxp = dxp[:, :, padding:padding + H, padding:padding + W]
        return (np.ascontiguousarray(dxp),)

    return _result("maxpool2d", (x,), np.ascontiguousarray(out), bwd)


# ---------------------------------------------------------------------------
# Batch normalization


class RunningStats:
    """Exponential-moving running mean and variance for eval-mode batch norm."""

    def __init__(self, num_features: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(num_features, dtype=dtype)
        self.var = np.ones(num_features, dtype=dtype)

    def snapshot(self) -> tuple:
        return (self.mean.copy(), self.var.copy())

    def restore(self, snap: tuple) -> None:
        self.mean[...] = snap[0]
        self.var[...] = snap[1]


def _bn_axes(x: Tensor, gamma: Tensor):
    if x.data.ndim == 2:
        axes, feats = (0,), x.shape[1]
    elif x.data.ndim == 4:
        axes, feats = (0, 2, 3), x.shape[1]
    else:
        raise ShapeError(f"batchnorm needs rank-2 or rank-4 input, got {x.shape}")
    if gamma.shape != (feats,):
        raise ShapeError(f"batchnorm: gamma shape {gamma.shape} does not match {feats} features")
    return axes, feats


def _bn_expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v[:, None, None]


def _per_feature_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of a*b along the normalization axes, without the product temporary."""
    if a.ndim == 2:
        return np.einsum("bf,bf->f", a, b)
    return np.einsum("bchw,bchw->c", a, b)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats,
              mode: str, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Normalize per feature (rank-2) or per channel over batch and space (rank-4).

    Train mode uses biased batch variance and updates running stats with the
    unbiased correction; eval mode normalizes with the running stats. The
    affine transform is folded into a single per-feature scale and shift.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    axes, feats = _bn_axes(x, gamma)
    if beta.shape != (feats,):
        raise ShapeError(f"batchnorm: beta shape {beta.shape} does not match {feats} features")
    _check_same_dtype(x, gamma, beta)
    ndim = x.data.ndim
    d = x.data

    if mode == "train":
        if x.shape[0] < 2:
            raise BatchSizeError(f"batchnorm train mode needs batch >= 2, got {x.shape[0]}")
        n = 1
        for ax in axes:
            n *= d.shape[ax]
        mean = d.mean(axis=axes)
        var = d.var(axis=axes)  # biased
        invstd = 1.0 / np.sqrt(var + eps)
        if state is not None:
            state.mean[...] = (1.0 - momentum) * state.mean + momentum * mean
            state.var[...] = (1.0 - momentum) * state.var + momentum * (var * n / (n - 1))
    else:
        mean = state.mean.astype(d.dtype)
        invstd = (1.0 / np.sqrt(state.var + eps)).astype(d.dtype)

    scale = gamma.data * invstd
    out = d * _bn_expand(scale, ndim)
    out += _bn_expand(beta.data - mean * scale, ndim)

    def bwd(g):
        sum_g = g.sum(axis=axes)
        sum_gd = _per_feature_dot(g, d)
        # gbeta and ggamma from the same reductions: sum g*xhat expands to
        # invstd * (sum g*d - mean * sum g)
        ggamma = invstd * (sum_gd - mean * sum_g) if gamma.requires_grad else None
        gbeta = sum_g if beta.requires_grad else None
        if mode == "eval":
            gx = g * _bn_expand(scale, ndim)
        else:
            # gx = c1*g + c2*d + c3: the usual train-mode formula with the
            # batch-statistic terms folded into per-feature coefficients
            mean_g = sum_g / n
            cov = sum_gd / n - mean * mean_g
            c1 = scale
            c2 = -c1 * invstd * invstd * cov
            c3 = -c1 * mean_g - mean * c2
            gx = g * _bn_expand(c1, ndim)
            gx += d * _bn_expand(c2, ndim)
            gx += _bn_expand(c3, ndim)
        return (gx, ggamma, gbeta)

    return _result("batchnorm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# Attention rescale


def apply_attention(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel rescale: out[b,c,i,j] = x[b,c,i,j] * w[b,c]."""
    if x.data.ndim != 4 or w.data.ndim != 2:
        raise ShapeError(f"apply_attention: need rank-4 x and rank-2 w, got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[0] or x.shape[1] != w.shape[1]:
        raise ShapeError(f"apply_attention: batch/channel mismatch {x.shape} vs {w.shape}")
    _check_same_dtype(x, w)
    xd, wd = x.data, w.data
    out = xd * wd[:, :, None, None]

    def bwd(g):
        gx = g * wd[:, :, None, None] if x.requires_grad else None
        gw = (g * xd).sum(axis=(2, 3)) if w.requires_grad else None
        return (gx, gw)

    return _result("apply_attention", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# Classification loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the label index, max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs rank-2 logits, got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape}, expected ({B},)")
    if labels.min() < 0 or labels.max() >= K:
        raise IndexError(f"cross_entropy: label out of range [0, {K})")
    d = logits.data
    z = d - d.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = -logp[np.arange(B), labels].mean()
    p = ez / denom

    def bwd(g):
        gl = p.copy()
        gl[np.arange(B), labels] -= 1.0
        gl *= g / B
        return (gl,)

    return _result("cross_entropy", (logits,), np.asarray(loss, dtype=d.dtype), bwd)
