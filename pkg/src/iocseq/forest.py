"""Random-forest baseline over per-step multi-hot window features."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .ndcore import checkpoint as ckpt
from .telemetry import RESERVED, EventVocabulary, WindowInstance

N_RESERVED = len(RESERVED)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = 10
    seed: int = 0
    max_features: int | None = None  # floor(sqrt(D)) when None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")


def feature_dim(w: int, n_events: int) -> int:
    return w * n_events + 3 * w


def featurize_window(instance: WindowInstance, n_events: int) -> np.ndarray:
    """Per-step event indicators, then per-step (log_sent, log_recv, log_dt).

    Reserved ids (padding, unknown) have no indicator column.
    """
    w = instance.w
    vec = np.zeros(feature_dim(w, n_events), dtype=np.float32)
    num_base = w * n_events
    for t, (step, real) in enumerate(zip(instance.steps, instance.pad_mask)):
        if not real:
            continue
        for e in step.event_ids:
            if e >= N_RESERVED:
                vec[t * n_events + e - N_RESERVED] = 1.0
        vec[num_base + 3 * t:num_base + 3 * t + 3] = (step.log_sent, step.log_recv, step.log_dt)
    return vec


def featurize(windows, vocab: EventVocabulary) -> np.ndarray:
    if not windows:
        return np.zeros((0, 0), dtype=np.float32)
    return np.stack([featurize_window(w, vocab.n_events) for w in windows])


class Tree:
    """Flat arrays; ``feature`` is -1 at leaves. Samples with x <= threshold go left."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {"feature": self.feature.tolist(),
                "threshold": [None if math.isnan(t) else t for t in self.threshold.tolist()],
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Tree":
        thr = [math.nan if t is None else t for t in obj["threshold"]]
        return cls(obj["feature"], thr, obj["left"], obj["right"], obj["value"])


class Forest:
    def __init__(self, config: ForestConfig, trees: list[Tree], n_features: int, n_classes: int,
                 classes=None, vocab: EventVocabulary | None = None, task=None, w=None):
        self.config = config
        self.trees = trees
        self.n_features = n_features
        self.n_classes = n_classes
        self.classes = list(classes) if classes is not None else None
        self.vocab = vocab
        self.task = task
        self.w = w

    def metadata(self) -> dict:
        meta = {
            "arch": "rf",
            "n_classes": str(self.n_classes),
            "n_features": str(self.n_features),
            "forest_config": json.dumps({"n_trees": self.config.n_trees,
                                         "max_depth": self.config.max_depth,
                                         "seed": self.config.seed,
                                         "max_features": self.config.max_features}),
            "trees": json.dumps([t.to_json() for t in self.trees], separators=(",", ":")),
        }
        if self.classes is not None:
            meta["classes"] = json.dumps(self.classes, separators=(",", ":"))
        if self.vocab is not None:
            meta["vocab"] = json.dumps(self.vocab.names, separators=(",", ":"))
            meta["vocab_hash"] = self.vocab.hash()
        if self.task is not None:
            meta["task"] = self.task
        if self.w is not None:
            meta["w"] = str(self.w)
        return meta

    def to_bytes(self) -> bytes:
        return ckpt.dumps({}, self.metadata())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_parts(cls, tensors, meta) -> "Forest":
        if meta.get("arch") != "rf":
            raise ValueError("checkpoint does not hold a random forest")
        cfg = ForestConfig(**json.loads(meta["forest_config"]))
        trees = [Tree.from_json(t) for t in json.loads(meta["trees"])]
        vocab = EventVocabulary(json.loads(meta["vocab"])) if "vocab" in meta else None
        classes = json.loads(meta["classes"]) if "classes" in meta else None
        w = int(meta["w"]) if "w" in meta else None
        return cls(cfg, trees, int(meta["n_features"]), int(meta["n_classes"]), classes,
                   vocab, meta.get("task"), w)

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_parts(*ckpt.load(path))


def _grow_tree(X, y, n_classes, max_depth, max_features, rng) -> Tree:
    n, d = X.shape
    sample = np.sort(rng.integers(0, n, n)).astype(np.intp)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(math.nan)
        left.append(-1)
        right.append(-1)
        hist = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        value.append(hist / hist.sum())
        return len(feature) - 1

    root = new_node(sample)
    stack = [(root, sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if (max_depth is not None and depth >= max_depth) or idx.size < 2 \
                or value[node].max() == 1.0:
            continue
        # like scikit-learn, keep drawing candidate features until one splits
        order = rng.permutation(d).astype(np.intp)
        best = (-1, math.nan, 0.0)
        for s in range(0, d, max_features):
            best = kernels.best_gini_split(X, y, idx, order[s:s + max_features], n_classes)
            if best[0] >= 0:
                break
        f, thr, _ = best
        if f < 0:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(feature, threshold, left, right, value)


def fit_forest(config: ForestConfig, X, y, n_classes: int | None = None, workers: int = 1,
               **attrs) -> Forest:
    """Bootstrap-aggregated CART trees with Gini splits on random feature subsets."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.ascontiguousarray(y, dtype=np.intp)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError(f"features {X.shape} do not match {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise ValueError("forest training needs at least two classes")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    d = X.shape[1]
    max_features = config.max_features or max(1, math.isqrt(d))
    seeds = np.random.SeedSequence([config.seed, 51]).spawn(config.n_trees)

    def grow(ss):
        return _grow_tree(X, y, n_classes, config.max_depth, max_features, np.random.default_rng(ss))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(grow, seeds))
    else:
        trees = [grow(ss) for ss in seeds]
    return Forest(config, trees, d, n_classes, **attrs)


def predict_forest(model: Forest, X) -> np.ndarray:
    """Mean of the trees' leaf class distributions, renormalized per row."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != model.n_features:
        raise ValueError(f"feature dimension {X.shape[1]} != forest's {model.n_features}")
    total = np.zeros((X.shape[0], model.n_classes), dtype=np.float64)
    for tree in model.trees:
        total += tree.predict(X)
    return total / total.sum(axis=1, keepdims=True)
