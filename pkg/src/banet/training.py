"""SGD training with cosine decay, CIFAR-format ingestion, and augmentation.

The recipe: SGD with momentum 0.9, weight decay 1e-4 on conv/FC weights only,
initial learning rate 0.1 linearly rescaled by batch_size/256, cosine-decayed
per epoch. Data order, augmentation, and therefore full training histories
are determined by the config seed.
"""
from __future__ import annotations

import csv
import glob
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .backbones import Network, save_checkpoint
from .nn import ParamInfo
from .tensor import Tensor, backward, cross_entropy, no_grad, tape

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels
_NUM_CLASSES = 10


class FormatError(ValueError):
    """Malformed data file."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training state is not usable."""


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.batch_size < 2 or self.epochs < 1:
            raise ValueError("batch_size must be >= 2 and epochs >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def effective_lr0(self) -> float:
        """Linear scaling: the base rate is defined for batch size 256."""
        return self.lr0 * self.batch_size / 256.0

    @staticmethod
    def from_json(path: str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        allowed = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}; allowed: {sorted(allowed)}")
        return TrainConfig(**doc)


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W, normalized
    labels: np.ndarray  # N ints in [0, num_classes)
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def _load_cifar_file(path: str) -> tuple:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % _RECORD_BYTES != 0:
        want = _RECORD_BYTES * max(1, round(len(blob) / _RECORD_BYTES))
        raise FormatError(
            f"{path}: expected a multiple of {_RECORD_BYTES} bytes "
            f"(e.g. {want}), got {len(blob)}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) >= _NUM_CLASSES:
        raise FormatError(f"{path}: label {labels.max()} out of range [0, {_NUM_CLASSES})")
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    pixels -= CIFAR_MEAN[:, None, None]
    pixels /= CIFAR_STD[:, None, None]
    return pixels, labels


def load_cifar10(data_dir: str) -> tuple:
    """Read the standard binary batches; returns (train, test) datasets."""
    train_files = sorted(glob.glob(os.path.join(data_dir, "data_batch_*.bin")))
    test_file = os.path.join(data_dir, "test_batch.bin")
    if not train_files:
        raise FormatError(f"{data_dir}: no data_batch_*.bin files found")
    if not os.path.exists(test_file):
        raise FormatError(f"{data_dir}: test_batch.bin missing")
    images, labels = zip(*(_load_cifar_file(p) for p in train_files))
    train = Dataset(np.concatenate(images), np.concatenate(labels), "train")
    test = Dataset(*_load_cifar_file(test_file), "test")
    return train, test


# ---------------------------------------------------------------------------
# Augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def pad_crop(image: np.ndarray, oy: int, ox: int, pad: int = 4) -> np.ndarray:
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    return padded[:, oy:oy + h, ox:ox + w].copy()


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random pad-crop then horizontal flip with probability one half."""
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    flip = rng.random() < 0.5
    out = pad_crop(image, int(oy), int(ox), pad)
    return hflip(out) if flip else out


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Vectorized augment; draws exactly like per-image augment in batch order."""
    n, c, h, w = images.shape
    offs = np.empty((n, 2), dtype=np.int64)
    flips = np.empty(n, dtype=bool)
    for i in range(n):
        offs[i] = rng.integers(0, 2 * pad + 1, size=2)
        flips[i] = rng.random() < 0.5
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    windows = np.lib.stride_tricks.sliding_window_view(padded, (h, w), axis=(2, 3))
    out = windows[np.arange(n), :, offs[:, 0], offs[:, 1]].copy()
    out[flips] = out[flips][:, :, :, ::-1]
    return out


# ---------------------------------------------------------------------------
# Optimization


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Epoch-level cosine decay from lr0 at t=0 to zero at t=total."""
    if t < 0 or t > total:
        raise ValueError(f"epoch index {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params: list[ParamInfo], velocities: dict, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (g + wd*p); p <- p - lr*v. Decay skips norms/biases."""
    for p in params:
        t = p.tensor
        g = t.grad
        if g.shape != t.data.shape:
            raise ValueError(f"registry mismatch for {p.name}")
        if p.decay and weight_decay:
            g = g + t.data * np.asarray(weight_decay, dtype=t.data.dtype)
        v = velocities[p.name]
        v *= momentum
        v += g
        t.data -= np.asarray(lr, dtype=t.data.dtype) * v


# ---------------------------------------------------------------------------
# Train / evaluate


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    test_top1: float
    test_top5: float


@dataclass
class History:
    records: list
    order_hashes: list

    def to_csv(self, path: str) -> None:
        rows = [["epoch", "lr", "train_loss", "test_top1", "test_top5"]]
        for r in self.records:
            rows.append([r.epoch, f"{r.lr:.8f}", f"{r.train_loss:.6f}",
                         f"{r.test_top1:.4f}", f"{r.test_top5:.4f}"])
        atomic_write_text(path, "\n".join(",".join(map(str, row)) for row in rows) + "\n")

    @staticmethod
    def read_csv(path: str) -> list:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))


def atomic_write_text(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def predict_logits(net: Network, images: np.ndarray, batch_size: int = 256,
                   trace=None) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            xb = Tensor(images[start:start + batch_size].astype(net.dtype, copy=False))
            outs.append(net.forward(xb, "eval", trace=trace).data)
    return np.concatenate(outs) if outs else np.zeros((0, net.arch.num_classes))


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Ties broken toward the lower class index (stable sort on -logits)."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((order == labels[:, None]).any(axis=1).mean())


def evaluate(net: Network, dataset: Dataset, batch_size: int = 256) -> tuple:
    logits = predict_logits(net, dataset.images, batch_size)
    return (topk_accuracy(logits, dataset.labels, 1),
            topk_accuracy(logits, dataset.labels, 5))


def _order_hash(indices: np.ndarray) -> str:
    return hashlib.sha256(indices.astype("<i8").tobytes()).hexdigest()[:16]


def train(net: Network, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
          out_dir: str | None = None, augment_data: bool = True,
          log=None) -> History:
    """Run the full recipe; returns per-epoch stats plus data-order hashes.

    Writes history.csv and checkpoint.ckpt into out_dir when given. Aborts
    with TrainingDiverged the moment a non-finite loss appears.
    """
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    velocities = {p.name: np.zeros_like(p.tensor.data) for p in params}
    lr0 = cfg.effective_lr0
    n = len(train_set)
    records: list[EpochStats] = []
    hashes: list[str] = []

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, lr0)
        order = rng.permutation(n)
        hashes.append(_order_hash(order))
        loss_sum = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # train-mode norm needs >= 2 samples
            xb = train_set.images[idx]
            if augment_data:
                xb = augment_batch(xb, rng)
            tape().reset()
            net.zero_grads()
            logits = net.forward(Tensor(xb.astype(cfg.dtype, copy=False)), "train")
            loss = cross_entropy(logits, train_set.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                tape().reset()
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {step}")
            backward(loss)
            sgd_step(params, velocities, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += value * len(idx)
        tape().reset()
        top1, top5 = evaluate(net, test_set, cfg.batch_size)
        records.append(EpochStats(epoch, lr, loss_sum / n, top1, top5))
        if log:
            r = records[-1]
            log(f"epoch {r.epoch:3d}  lr {r.lr:.5f}  loss {r.train_loss:.4f}  "
                f"top1 {r.test_top1:.4f}  top5 {r.test_top5:.4f}")

    history = History(records, hashes)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        history.to_csv(os.path.join(out_dir, "history.csv"))
        save_checkpoint(net, os.path.join(out_dir, "checkpoint.ckpt"))
    return history
