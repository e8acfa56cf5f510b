"""Random-forest regression and per-weight importance of the tuning objectives.

Bagged variance-reduction regression trees fitted on the evaluation trace of
the weight search: one forest per objective, features are the ten cost
weights.  Importance is the mean impurity (variance) decrease attributed to
each feature across trees, row-normalized so objectives are comparable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import FEVAL_NAMES
from .tuning import EvaluationSample, WEIGHT_KEYS, N_WEIGHTS

MIN_SAMPLES = 20


@dataclass
class ForestConfig:
    tree_count: int = 200
    max_depth: int = 8
    min_samples_leaf: int = 5
    bootstrap_fraction: float = 1.0
    features_per_split: int = math.ceil(N_WEIGHTS / 3)
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be at least 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be at least 1")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.features_per_split < 1:
            raise ValueError("features_per_split must be at least 1")


class _Tree:
    """Axis-aligned regression tree stored as flat node arrays."""

    __slots__ = ("feature", "threshold", "left", "right", "value", "importance")

    def __init__(self, n_features: int):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.importance = np.zeros(n_features)

    def _new_node(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def fit(self, X, y, cfg: ForestConfig, rng) -> None:
        n_total = len(y)
        self._grow(X, y, np.arange(n_total), 0, cfg, rng, n_total)

    def _grow(self, X, y, idx, depth, cfg, rng, n_total) -> int:
        node = self._new_node(float(np.mean(y[idx])))
        if depth >= cfg.max_depth or len(idx) < 2 * cfg.min_samples_leaf:
            return node
        yi = y[idx]
        sse_parent = float(np.sum((yi - yi.mean()) ** 2))
        if sse_parent <= 0.0:
            return node
        m_try = min(cfg.features_per_split, X.shape[1])
        feats = rng.choice(X.shape[1], size=m_try, replace=False)
        best = (0.0, -1, 0.0)  # (impurity decrease, feature, threshold)
        for f in feats:
            order = np.argsort(X[idx, f], kind="stable")
            xs = X[idx[order], f]
            ys = yi[order]
            csum = np.cumsum(ys)
            csq = np.cumsum(ys ** 2)
            n = len(ys)
            for cut in range(cfg.min_samples_leaf, n - cfg.min_samples_leaf + 1):
                if xs[cut] <= xs[cut - 1]:
                    continue
                sl, ql = csum[cut - 1], csq[cut - 1]
                sr, qr = csum[-1] - sl, csq[-1] - ql
                sse = (ql - sl * sl / cut) + (qr - sr * sr / (n - cut))
                gain = sse_parent - sse
                if gain > best[0]:
                    best = (gain, int(f), 0.5 * (xs[cut] + xs[cut - 1]))
        gain, f, thr = best
        if f < 0 or gain <= 1e-12 * max(1.0, sse_parent):
            return node
        mask = X[idx, f] <= thr
        self.feature[node] = f
        self.threshold[node] = thr
        self.importance[f] += gain / n_total
        self.left[node] = self._grow(X, y, idx[mask], depth + 1, cfg, rng, n_total)
        self.right[node] = self._grow(X, y, idx[~mask], depth + 1, cfg, rng, n_total)
        return node

    def predict(self, X) -> np.ndarray:
        out = np.empty(len(X))
        for i, row in enumerate(X):
            node = 0
            while self.feature[node] >= 0:
                node = self.left[node] if row[self.feature[node]] <= self.threshold[node] \
                    else self.right[node]
            out[i] = self.value[node]
        return out

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)


@dataclass
class Forest:
    trees: list[_Tree]
    oob_masks: np.ndarray          # (trees, samples) True where sample left out
    X: np.ndarray
    y: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        acc = np.zeros(len(X))
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def oob_r2(self) -> float:
        """Out-of-bag coefficient of determination."""
        n = len(self.y)
        acc = np.zeros(n)
        cnt = np.zeros(n)
        for t, mask in zip(self.trees, self.oob_masks):
            if not np.any(mask):
                continue
            acc[mask] += t.predict(self.X[mask])
            cnt[mask] += 1
        seen = cnt > 0
        if not np.any(seen):
            return float("nan")
        pred = acc[seen] / cnt[seen]
        resid = np.sum((self.y[seen] - pred) ** 2)
        total = np.sum((self.y[seen] - self.y[seen].mean()) ** 2)
        return float(1.0 - resid / total) if total > 0 else float("nan")


def fit_forest(X: np.ndarray, y: np.ndarray, cfg: ForestConfig) -> Forest:
    """Bagged regression trees; deterministic per seed."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (samples, features) aligned with y")
    if len(y) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    n = len(y)
    n_boot = max(1, int(round(cfg.bootstrap_fraction * n)))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.tree_count)
    trees = []
    oob = np.zeros((cfg.tree_count, n), dtype=bool)
    for i in range(cfg.tree_count):
        rng = np.random.default_rng(seeds[i])
        pick = rng.integers(0, n, n_boot)
        mask = np.ones(n, dtype=bool)
        mask[pick] = False
        oob[i] = mask
        tree = _Tree(X.shape[1])
        tree.fit(X[pick], y[pick], cfg, rng)
        trees.append(tree)
    return Forest(trees=trees, oob_masks=oob, X=X, y=y)


def importance(forest: Forest) -> np.ndarray:
    """Mean impurity decrease per feature, normalized to sum one.

    A forest that never split (constant target) reports all zeros.
    """
    acc = np.zeros_like(forest.trees[0].importance)
    for t in forest.trees:
        acc += t.importance
    acc /= len(forest.trees)
    total = acc.sum()
    return acc / total if total > 0 else acc


@dataclass
class ImportanceMatrix:
    """Rows are the twelve objectives, columns the ten weights."""

    values: np.ndarray                  # (12, 10), rows sum to 1 or are zero
    flagged_rows: list[str] = field(default_factory=list)
    row_names: tuple = FEVAL_NAMES
    col_names: tuple = WEIGHT_KEYS

    def rank_of(self, objective: str, weight: str) -> int:
        """1-based importance rank of a weight within an objective row."""
        r = self.row_names.index(objective)
        c = self.col_names.index(weight)
        order = np.argsort(-self.values[r], kind="stable")
        return int(np.nonzero(order == c)[0][0]) + 1

    def heat_band(self, r: int, c: int) -> str:
        """Quartile bin of an entry within its row (low / mid / high / top)."""
        row = self.values[r]
        qs = np.quantile(row, [0.25, 0.5, 0.75])
        v = self.values[r, c]
        return ("low", "mid", "high", "top")[int(np.searchsorted(qs, v, side="right"))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["feval"] + [f"W_{k}" for k in self.col_names]
                       + [f"band_W_{k}" for k in self.col_names])
            for r, name in enumerate(self.row_names):
                w.writerow([name] + [repr(float(v)) for v in self.values[r]]
                           + [self.heat_band(r, c) for c in range(len(self.col_names))])


def importance_matrix(samples: list[EvaluationSample], cfg: ForestConfig) -> ImportanceMatrix:
    """One forest per objective over the search samples, importances stacked."""
    if len(samples) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    X = np.array([s.weights for s in samples])
    Y = np.array([s.fevals for s in samples])
    rows = np.zeros((len(FEVAL_NAMES), N_WEIGHTS))
    flagged = []
    for r, name in enumerate(FEVAL_NAMES):
        forest = fit_forest(X, Y[:, r], ForestConfig(
            tree_count=cfg.tree_count, max_depth=cfg.max_depth,
            min_samples_leaf=cfg.min_samples_leaf,
            bootstrap_fraction=cfg.bootstrap_fraction,
            features_per_split=cfg.features_per_split, seed=cfg.seed + r))
        rows[r] = importance(forest)
        if rows[r].sum() <= 0:
            flagged.append(name)
    return ImportanceMatrix(values=rows, flagged_rows=flagged)
