"""Supervised training, cross-validated grid search and the window-width sweep."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import ARCHS, Model, make_config
from .ndcore import Graph, NonFiniteGradient, OptimizerState, adam_step, ops
from .telemetry import (DEFAULT_WINDOW, TASKS, EventVocabulary, WindowBatch, WindowInstance,
                        stack_windows, windowize)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    task: str = "family"
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    per_class_n: int | None = None
    classes: list | None = None
    init: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.per_class_n is not None and self.per_class_n < 1:
            raise ValueError("per-class n must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")


class LabeledWindows:
    """Windows whose final interval carries a label for the task."""

    def __init__(self, windows: list[WindowInstance], labels: list[str]):
        if len(windows) != len(labels):
            raise ValueError("windows and labels differ in length")
        self.windows = windows
        self.labels = list(labels)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def keys(self) -> list:
        return [w.key for w in self.windows]

    def subset(self, idx) -> "LabeledWindows":
        return LabeledWindows([self.windows[i] for i in idx], [self.labels[i] for i in idx])

    def classes(self) -> list[str]:
        return sorted(set(self.labels))

    def targets(self, classes: list[str]) -> np.ndarray:
        index = {c: i for i, c in enumerate(classes)}
        missing = sorted(set(self.labels) - set(index))
        if missing:
            raise ValueError(f"labels not in the class list: {missing}")
        return np.array([index[l] for l in self.labels], dtype=np.int64)

    def batch(self) -> WindowBatch:
        return stack_windows(self.windows)


def labeled_windows(records, vocab: EventVocabulary, task: str, w: int = DEFAULT_WINDOW,
                    stride: int = 1) -> LabeledWindows:
    wins, labels = [], []
    for win in windowize(records, vocab, w, stride):
        name = win.label.get(task) if win.label is not None else None
        if name:
            wins.append(win)
            labels.append(name)
    return LabeledWindows(wins, labels)


def subsample_per_class(labels, n: int | None, seed: int) -> np.ndarray:
    """Sorted indices holding min(n, available) instances of every class."""
    labels = list(labels)
    if n is None:
        return np.arange(len(labels))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    chosen = []
    for c in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == c])
        chosen.extend(rng.permutation(idx)[:n].tolist())
    return np.array(sorted(chosen), dtype=np.int64)


def stratified_folds(labels, folds: int, seed: int) -> np.ndarray:
    """Fold id per instance; each class is spread round-robin over shuffled order."""
    labels = list(labels)
    fold = np.empty(len(labels), dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    for c in sorted(set(labels)):
        idx = np.array([i for i, l in enumerate(labels) if l == c])
        if len(idx) < folds:
            raise ValueError(f"class {c!r} has {len(idx)} instances, fewer than {folds} folds")
        fold[rng.permutation(idx)] = np.arange(len(idx)) % folds
    return fold


def accuracy_of(model: Model, batch: WindowBatch, targets: np.ndarray) -> float:
    probs = model.predict_proba(batch)
    return float((probs.argmax(axis=1) == targets).mean())


def train(config: TrainConfig, model: Model, data: LabeledWindows, on_epoch=None):
    """Minimize categorical cross entropy on ``data`` in place.

    Returns ``(model, history)`` with one {epoch, loss, train_acc} entry per
    epoch; ``train_acc`` is measured on the batches as they were trained.
    """
    classes = config.classes or model.classes or data.classes()
    idx = subsample_per_class(data.labels, config.per_class_n, config.seed)
    data = data.subset(idx)
    if len(set(data.labels)) < 2:
        raise ValueError("training needs at least two classes")
    if model.config.n_out != len(classes):
        raise ValueError(f"model has {model.config.n_out} outputs for {len(classes)} classes")
    y = data.targets(classes)
    model.classes = list(classes)
    model.task = config.task
    batch_all = data.batch()
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    state = OptimizerState(lr=config.lr)
    params = list(model.params.values())
    history = []
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(y))
        total, correct = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            bi = order[s:s + config.batch_size]
            with Graph() as g:
                logits = model.forward(batch_all.take(bi), training=True, rng=drop_rng)
                loss = ops.categorical_cross_entropy(logits, y[bi])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteGradient(f"training loss is {value} at epoch {epoch}, "
                                        f"batch starting at {s}")
            grads = g.backward(loss, wrt=params)
            adam_step(state, model.params, {n: grads[p] for n, p in model.params.items()})
            total += value * len(bi)
            correct += int((logits.data.argmax(axis=1) == y[bi]).sum())
        entry = {"epoch": epoch, "loss": total / len(y), "train_acc": correct / len(y)}
        history.append(entry)
        log.info("epoch %d loss %.5f train_acc %.4f", epoch, entry["loss"], entry["train_acc"])
        if on_epoch is not None:
            on_epoch(entry)
    return model, history


def write_history(history: list[dict], fh) -> None:
    for entry in history:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


# -- grid search -----------------------------------------------------------------

def _pow2(lo: int, hi: int) -> tuple[int, ...]:
    return tuple(2 ** k for k in range(lo, hi + 1))


FULL_RANGES = {
    "lstm": {"embedding_dim": _pow2(6, 8), "lstm_layers": (1, 2, 3, 4),
             "lstm_units": _pow2(3, 11), "dense_layers": (1, 2, 3), "dense_units": _pow2(6, 10)},
    "cnn": {"embedding_dim": _pow2(6, 8), "cnn_layers": (1, 2, 3, 4), "kernel": _pow2(1, 3),
            "filters": _pow2(2, 7), "dense_layers": (1, 2, 3), "dense_units": _pow2(6, 10)},
    "transformer": {"embedding_dim": _pow2(6, 8), "tf_blocks": (1, 2, 3, 4), "heads": _pow2(2, 7),
                    "ffn_units": _pow2(2, 7), "dense_layers": (1, 2, 3),
                    "dense_units": _pow2(6, 10)},
    "rf": {"n_trees": (10, 100, 1000), "max_depth": (2, 10, 100, None)},
}

# a few points around the desk preset, small enough to search on a laptop
DESK_RANGES = {
    "lstm": {"lstm_units": (32, 64), "dense_layers": (1, 2)},
    "cnn": {"filters": (16, 32), "kernel": (3, 4)},
    "transformer": {"tf_blocks": (1, 2), "heads": (2, 4)},
    "rf": {"n_trees": (10, 100), "max_depth": (10, None)},
}


@dataclass
class GridSpec:
    arch: str
    ranges: dict = field(default_factory=dict)
    preset: str = "desk"

    def __post_init__(self):
        if self.arch not in ARCHS + ("rf",):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if not self.ranges or any(len(v) == 0 for v in self.ranges.values()):
            raise ValueError("grid is empty")

    @classmethod
    def full(cls, arch: str, preset: str = "paper") -> "GridSpec":
        return cls(arch, {k: tuple(v) for k, v in FULL_RANGES[arch].items()}, preset)

    @classmethod
    def desk(cls, arch: str) -> "GridSpec":
        return cls(arch, {k: tuple(v) for k, v in DESK_RANGES[arch].items()}, "desk")

    def points(self) -> list[dict]:
        names = list(self.ranges)
        pts = []
        for values in itertools.product(*(self.ranges[n] for n in names)):
            pt = dict(zip(names, values))
            if self.arch == "transformer" and "embedding_dim" in pt:
                # model width follows the embedding, widened when heads exceed it
                pt["d_model"] = max(pt["embedding_dim"], pt.get("heads", 1))
            pts.append(pt)
        return pts

    def size(self) -> int:
        return int(np.prod([len(v) for v in self.ranges.values()]))

    def to_json(self) -> dict:
        return asdict(self)


def grid_search(grid: GridSpec, data: LabeledWindows, vocab: EventVocabulary,
                config: TrainConfig, folds: int = 5, points: list[dict] | None = None,
                on_point=None):
    """Mean validation accuracy of every grid point under stratified k-fold CV.

    Returns ``(best_point, rows)``; ties keep the earliest point.
    """
    from . import forest  # forest imports trainer helpers

    pts = grid.points() if points is None else points
    classes = config.classes or data.classes()
    fold = stratified_folds(data.labels, folds, config.seed)
    keys = data.keys
    rows = []
    best, best_score = None, -np.inf
    for i, pt in enumerate(pts):
        scores = []
        for f in range(folds):
            tr, va = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
            if {keys[j] for j in tr} & {keys[j] for j in va}:
                raise AssertionError("training and validation folds share instances")
            train_part, val_part = data.subset(tr), data.subset(va)
            if grid.arch == "rf":
                fcfg = forest.ForestConfig(seed=config.seed, **pt)
                model = forest.fit_forest(fcfg, forest.featurize(train_part.windows, vocab),
                                          train_part.targets(classes), len(classes))
                pred = forest.predict_forest(model, forest.featurize(val_part.windows, vocab))
                scores.append(float((pred.argmax(axis=1) == val_part.targets(classes)).mean()))
            else:
                mcfg = make_config(grid.arch, grid.preset, len(vocab.names), len(classes),
                                   w=val_part.windows[0].w, **pt)
                model = Model(mcfg, seed=config.seed, vocab=vocab, classes=classes)
                cfg = TrainConfig(**{**asdict(config), "classes": classes, "per_class_n": None})
                train(cfg, model, train_part)
                scores.append(accuracy_of(model, val_part.batch(), val_part.targets(classes)))
        row = {"point": pt, "fold_acc": scores, "mean_acc": float(np.mean(scores))}
        rows.append(row)
        if on_point is not None:
            on_point(i, row)
        if row["mean_acc"] > best_score:
            best, best_score = pt, row["mean_acc"]
    return best, rows


def sweep_widths(step: int = 2) -> list[int]:
    """Widths from 3 to 41 inclusive at the given stride (41 always included)."""
    ws = list(range(3, 42, step))
    if ws[-1] != 41:
        ws.append(41)
    return ws


def window_width_sweep(records, vocab: EventVocabulary, config: TrainConfig, arch: str = "transformer",
                       preset: str = "desk", widths=None, holdout: float = 0.2, on_row=None) -> list[dict]:
    """Validation accuracy per window width on a seeded stratified holdout split."""
    widths = sweep_widths() if widths is None else list(widths)
    rows = []
    for w in widths:
        data = labeled_windows(records, vocab, config.task, w)
        classes = config.classes or data.classes()
        folds = max(2, int(round(1 / holdout)))
        fold = stratified_folds(data.labels, folds, config.seed)
        tr, va = np.flatnonzero(fold != 0), np.flatnonzero(fold == 0)
        train_part, val_part = data.subset(tr), data.subset(va)
        mcfg = make_config(arch, preset, len(vocab.names), len(classes), w=w)
        model = Model(mcfg, seed=config.seed, vocab=vocab, classes=classes)
        train(TrainConfig(**{**asdict(config), "classes": classes}), model, train_part)
        acc = accuracy_of(model, val_part.batch(), val_part.targets(classes))
        row = {"w": w, "accuracy": acc, "n_train": len(tr), "n_val": len(va)}
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
