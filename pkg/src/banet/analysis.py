"""Attention-weight traces and bridged-feature importance.

Two consumers: per-class mean attention-weight curves (exported as CSV), and
a regression-forest importance analysis that attributes each block's
attention weights to the squeezed branch features feeding it. Importance is
the regression analog of Gini decrease: total weighted variance reduction
from splits on a feature, normalized to sum one.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import ConfigError
from .backbones import Network
from .training import Dataset, predict_logits


class SamplingError(ValueError):
    """Not enough samples for the requested analysis."""


# ---------------------------------------------------------------------------
# Trace capture


@dataclass
class AttentionTrace:
    block_id: int
    branches: list          # per branch: (N, width) squeezed features
    omega: np.ndarray       # (N, channels) attention weights

    @property
    def num_samples(self) -> int:
        return self.omega.shape[0]


def class_filter_mask(dataset: Dataset, class_filter=None) -> np.ndarray:
    if class_filter is None:
        return np.ones(len(dataset), dtype=bool)
    return np.isin(dataset.labels, np.asarray(list(class_filter)))


def capture_traces(net: Network, dataset: Dataset, class_filter=None,
                   batch_size: int = 256) -> list[AttentionTrace]:
    """Record squeezed branch features and final weights per attention block.

    Capture is a pure observer: forward results are identical with and
    without it.
    """
    att_blocks = net.attention_blocks()
    if not att_blocks:
        raise ConfigError("network has no attention modules to trace")
    mask = class_filter_mask(dataset, class_filter)
    images = dataset.images[mask]
    if len(images) == 0:
        raise SamplingError("class filter selected no samples")
    raw: list = []
    predict_logits(net, images, batch_size, trace=raw)
    per_block: dict[int, list] = {i: [] for i in att_blocks}
    for entry in raw:
        per_block[entry.block_id].append(entry)
    traces = []
    for block_id in att_blocks:
        entries = per_block[block_id]
        branches = [np.concatenate([e.branches[i] for e in entries])
                    for i in range(len(entries[0].branches))]
        omega = np.concatenate([e.omega for e in entries])
        traces.append(AttentionTrace(block_id, branches, omega))
    return traces


def filtered_labels(dataset: Dataset, class_filter=None) -> np.ndarray:
    return dataset.labels[class_filter_mask(dataset, class_filter)]


def class_mean_weights(traces: list[AttentionTrace], labels: np.ndarray) -> list:
    """Per class and block, the channel-wise mean attention weight.

    Returns (class, block, channel, mean) rows ready for CSV export; classes
    with no samples are skipped with a warning.
    """
    if not traces:
        raise ValueError("no traces given")
    rows = []
    for cls in sorted(set(int(v) for v in labels)):
        sel = labels == cls
        if not sel.any():
            warnings.warn(f"class {cls} has no samples; skipped")
            continue
        for t in traces:
            means = t.omega[sel].mean(axis=0)
            rows.extend((cls, t.block_id, ch, float(m)) for ch, m in enumerate(means))
    return rows


def mean_weights_csv(rows: list) -> str:
    lines = ["class,block,channel,mean_weight"]
    lines += [f"{c},{b},{ch},{m:.8f}" for c, b, ch, m in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Regression forest


@dataclass
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 8
    min_samples_leaf: int = 5
    bootstrap: bool = True


@dataclass
class TreeNode:
    value: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    reduction: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class RegressionForest:
    config: ForestConfig
    n_features: int
    trees: list = field(default_factory=list)

    def feature_reductions(self) -> np.ndarray:
        acc = np.zeros(self.n_features)
        stack = [t for t in self.trees]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            acc[node.feature] += node.reduction
            stack.append(node.left)
            stack.append(node.right)
        return acc

    @property
    def degenerate(self) -> bool:
        return float(self.feature_reductions().sum()) == 0.0

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = None
        for tree in self.trees:
            pred = np.empty((len(X), tree.value.shape[0]))
            for i, row in enumerate(X):
                node = tree
                while not node.is_leaf:
                    node = node.left if row[node.feature] <= node.threshold else node.right
                pred[i] = node.value
            out = pred if out is None else out + pred
        return out / len(self.trees)


def _grow(X: np.ndarray, Y: np.ndarray, idx: np.ndarray, depth: int,
          cfg: ForestConfig, rng: np.random.Generator) -> TreeNode:
    y = Y[idx]
    n = len(idx)
    node = TreeNode(value=y.mean(axis=0))
    if depth >= cfg.max_depth or n < 2 * cfg.min_samples_leaf:
        return node
    tot1 = y.sum(axis=0)
    tot2 = (y * y).sum(axis=0)
    parent_sse = float(tot2.sum() - (tot1 * tot1).sum() / n)
    if parent_sse <= 1e-12:
        return node

    d = X.shape[1]
    k = max(1, int(np.sqrt(d)))
    positions = np.arange(cfg.min_samples_leaf, n - cfg.min_samples_leaf + 1)
    best_red, best_feat, best_thr = 1e-12, -1, 0.0
    for f in rng.permutation(d)[:k]:
        xs_all = X[idx, f]
        order = np.argsort(xs_all, kind="stable")
        xs = xs_all[order]
        valid = xs[positions - 1] < xs[positions]
        if not valid.any():
            continue
        ys = y[order]
        c1 = np.cumsum(ys, axis=0)
        c2 = np.cumsum(ys * ys, axis=0)
        l1, l2 = c1[positions - 1], c2[positions - 1]
        sse_l = l2.sum(axis=1) - (l1 * l1).sum(axis=1) / positions
        r1, r2 = tot1 - l1, tot2 - l2
        sse_r = r2.sum(axis=1) - (r1 * r1).sum(axis=1) / (n - positions)
        red = parent_sse - sse_l - sse_r
        red[~valid] = -np.inf
        j = int(np.argmax(red))
        if red[j] > best_red:
            best_red = float(red[j])
            best_feat = int(f)
            best_thr = float((xs[positions[j] - 1] + xs[positions[j]]) / 2)

    if best_feat < 0:
        return node
    node.feature = best_feat
    node.threshold = best_thr
    node.reduction = best_red
    go_left = X[idx, best_feat] <= best_thr
    node.left = _grow(X, Y, idx[go_left], depth + 1, cfg, rng)
    node.right = _grow(X, Y, idx[~go_left], depth + 1, cfg, rng)
    return node


def fit_forest(X: np.ndarray, Y: np.ndarray, cfg: Optional[ForestConfig] = None,
               seed: int = 0) -> RegressionForest:
    """Grow bootstrap trees on sqrt(D) feature subsets per split.

    Multi-output targets are handled by a single forest whose split criterion
    is the variance summed over output dimensions. Deterministic under seed.
    """
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = len(X)
    if n < 2 * cfg.min_samples_leaf:
        raise SamplingError(
            f"need at least {2 * cfg.min_samples_leaf} samples, got {n}")
    rng = np.random.default_rng(seed)
    forest = RegressionForest(cfg, X.shape[1])
    for _ in range(cfg.n_trees):
        idx = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        forest.trees.append(_grow(X, Y, idx, 0, cfg, rng))
    return forest


def gini_importance(forest: RegressionForest) -> np.ndarray:
    """Normalized total weighted variance reduction per feature (sums to 1)."""
    if not forest.trees:
        raise ValueError("forest has no trees")
    acc = forest.feature_reductions()
    total = acc.sum()
    if total == 0.0:
        return np.zeros_like(acc)  # degenerate: no informative split anywhere
    return acc / total


# ---------------------------------------------------------------------------
# Branch importance


@dataclass
class BlockImportance:
    block_id: int
    shares: np.ndarray      # per branch, sums to 1 unless degenerate
    degenerate: bool


@dataclass
class ImportanceReport:
    blocks: list

    def to_csv(self) -> str:
        lines = ["block,branch,share"]
        for b in self.blocks:
            lines += [f"{b.block_id},{i + 1},{s:.8f}" for i, s in enumerate(b.shares)]
        return "\n".join(lines) + "\n"


def branch_importance(traces: list[AttentionTrace],
                      cfg: Optional[ForestConfig] = None,
                      seed: int = 0) -> ImportanceReport:
    """Fit one forest per block on the concatenated branch features against
    the attention weights, then aggregate importances within each branch."""
    cfg = cfg or ForestConfig()
    blocks = []
    for t in traces:
        if len(t.branches) < 2:
            raise ConfigError(
                f"block {t.block_id} has {len(t.branches)} branch(es); "
                "importance needs bridged attention with at least 2")
        X = np.concatenate(t.branches, axis=1)
        forest = fit_forest(X, t.omega, cfg, seed + t.block_id)
        imp = gini_importance(forest)
        shares = []
        start = 0
        for br in t.branches:
            width = br.shape[1]
            shares.append(imp[start:start + width].sum())
            start += width
        blocks.append(BlockImportance(t.block_id, np.array(shares),
                                      forest.degenerate))
    return ImportanceReport(blocks)
