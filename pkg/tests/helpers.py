"""Shared independent oracles and gradient-check utilities.

Everything here deliberately avoids the library's own compute paths: oracles
are plain loops or textbook two-pass formulas, and gradient references come
from central finite differences of forward evaluations only.
"""
from __future__ import annotations

import numpy as np

from banet.tensor import no_grad


# ---------------------------------------------------------------------------
# Oracles


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_oracle(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct sliding-window cross-correlation."""
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = x
    out = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    window = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(window * w[o])
    return out


def gap_oracle(x: np.ndarray) -> np.ndarray:
    B, C = x.shape[:2]
    out = np.zeros((B, C), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            out[b, c] = x[b, c].sum() / x[b, c].size
    return out


def batchnorm_oracle(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Two-pass train-mode normalization: mean first, then squared deviations."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mean = x.sum(axis=axes) / np.prod([x.shape[a] for a in axes])
    shaped = mean if x.ndim == 2 else mean[:, None, None]
    dev = x - shaped
    var = (dev * dev).sum(axis=axes) / np.prod([x.shape[a] for a in axes])
    vshaped = var if x.ndim == 2 else var[:, None, None]
    xhat = dev / np.sqrt(vshaped + eps)
    g = gamma if x.ndim == 2 else gamma[:, None, None]
    b = beta if x.ndim == 2 else beta[:, None, None]
    return g * xhat + b


def topk_oracle(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Brute-force top-k accuracy; ties broken toward the lower class index."""
    hits = 0
    for row, label in zip(logits, labels):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        if label in order[:k]:
            hits += 1
    return hits / len(labels)


# ---------------------------------------------------------------------------
# Finite differences


def finite_diff_grads(f, arrays, h: float = 1e-5):
    """Central-difference gradients of the scalar f() w.r.t. each array in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def snapshot_buffers(module) -> list:
    return [(arr, arr.copy()) for _, arr in module.named_buffers()]


def restore_buffers(snap) -> None:
    for arr, saved in snap:
        arr[...] = saved


def frozen_forward_scalar(module, fn):
    """Evaluate fn() -> float without recording and without perturbing buffers."""
    snap = snapshot_buffers(module)
    try:
        with no_grad():
            return fn()
    finally:
        restore_buffers(snap)


# ---------------------------------------------------------------------------
# Synthetic data in the CIFAR-10 binary layout


def class_patterns(seed: int = 7) -> np.ndarray:
    """Ten smooth, horizontally symmetric color patterns (survive flips/crops)."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((10, 3, 8, 8))
    up = np.kron(base, np.ones((1, 1, 4, 4)))
    sym = (up + up[..., ::-1]) / 2.0
    sym /= sym.std(axis=(1, 2, 3), keepdims=True)
    return sym


def render_images(labels: np.ndarray, rng: np.random.Generator,
                  amplitude: float = 45.0, noise: float = 25.0) -> np.ndarray:
    patterns = class_patterns()
    imgs = 128.0 + amplitude * patterns[labels]
    imgs = imgs + rng.normal(0.0, noise, imgs.shape)
    return np.clip(imgs, 0, 255).astype(np.uint8)


def write_cifar_file(path, labels: np.ndarray, images: np.ndarray) -> None:
    records = []
    for label, img in zip(labels, images):
        records.append(bytes([int(label)]) + img.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(records))


def write_cifar_dir(path, n_train: int, n_test: int, seed: int = 0) -> str:
    import os
    os.makedirs(path, exist_ok=True)
    rng = np.random.default_rng(seed)
    # cycle through classes then shuffle: every class present in both splits
    train_labels = rng.permutation(np.arange(n_train) % 10)
    test_labels = rng.permutation(np.arange(n_test) % 10)
    write_cifar_file(os.path.join(path, "data_batch_1.bin"),
                     train_labels, render_images(train_labels, rng))
    write_cifar_file(os.path.join(path, "test_batch.bin"),
                     test_labels, render_images(test_labels, rng))
    return str(path)


def tiny_arch(attention: str = "none", blocks: int = 2, num_classes: int = 3):
    """Two-block toy network used by gradient and smoke tests."""
    from banet.attention import BridgeSourceConfig
    from banet.backbones import ArchSpec, BlockSpec, StageSpec, StemSpec
    sources = (BridgeSourceConfig.all_for(2) if attention == "ba"
               else BridgeSourceConfig())
    template = BlockSpec("basic", 8, 8, 8, attention=attention,
                         bridge_sources=sources)
    return ArchSpec("tiny", StemSpec(8, 3, 1, 1), [StageSpec(blocks, template)],
                    num_classes=num_classes, input_shape=(3, 6, 6))
