"""Next-interval event-set prediction as an unsupervised pre-training task."""

from __future__ import annotations

import logging

import numpy as np

from .models import Model
from .ndcore import Graph, NonFiniteGradient, OptimizerState, adam_step, ops
from .telemetry import (BUCKET_SECONDS, RESERVED, EventVocabulary, WindowInstance,
                        encode_window, group_by_user, stack_windows, window_ends)

log = logging.getLogger(__name__)
N_RESERVED = len(RESERVED)


class PretrainPairs:
    """Input windows with multi-hot targets over the non-reserved events."""

    def __init__(self, windows: list[WindowInstance], targets: np.ndarray):
        self.windows = windows
        self.targets = targets

    def __len__(self) -> int:
        return len(self.windows)


def target_vector(event_ids, n_events: int) -> np.ndarray:
    y = np.zeros(n_events, dtype=np.float32)
    for e in event_ids:
        if e >= N_RESERVED:
            y[e - N_RESERVED] = 1.0
    return y


def make_pretrain_pairs(records, vocab: EventVocabulary, w: int = 21, stride: int = 1,
                        require_adjacent: bool = False) -> PretrainPairs:
    """Windows of ``w`` consecutive logged intervals paired with the next one's events.

    Targets are enumerated from each user's last interval backwards every
    ``stride`` intervals. With ``require_adjacent`` the target must fall in
    the bucket right after the window's last interval. Pairs whose target
    holds only reserved ids are dropped.
    """
    if w < 1 or stride < 1:
        raise ValueError("w and stride must be >= 1")
    windows, targets = [], []
    for key, recs in group_by_user(records).items():
        n = len(recs)
        if n < w + 1:
            continue
        for j in window_ends(n - w, stride):
            tgt = j + w  # index of the target interval
            if require_adjacent and recs[tgt].ts - recs[tgt - 1].ts != BUCKET_SECONDS:
                continue
            y = target_vector([vocab.id(e) for e in recs[tgt].events], vocab.n_events)
            if not y.any():
                continue
            windows.append(encode_window(recs[:tgt], vocab, tgt - 1, w))
            targets.append(y)
    windows_targets = sorted(zip(windows, targets), key=lambda p: p[0].key)
    return PretrainPairs([p[0] for p in windows_targets],
                         np.array([p[1] for p in windows_targets], dtype=np.float32)
                         .reshape(-1, vocab.n_events))


def mean_bce(model: Model, pairs: PretrainPairs, chunk: int = 512) -> float:
    """Mean binary cross entropy of ``model`` over all pairs (no dropout)."""
    total, count = 0.0, 0
    for s in range(0, len(pairs), chunk):
        idx = np.arange(s, min(s + chunk, len(pairs)))
        batch = stack_windows([pairs.windows[i] for i in idx])
        loss = ops.binary_cross_entropy(model.forward(batch), pairs.targets[idx])
        total += float(loss.data) * len(idx)
        count += len(idx)
    return total / max(count, 1)


def pretrain(model: Model, pairs: PretrainPairs, epochs: int = 5, batch_size: int = 64,
             seed: int = 0, lr: float = 1e-3, on_epoch=None) -> list[dict]:
    """Fit ``model`` (sigmoid head with |V|-2 outputs) to the pairs in place.

    Returns one log entry per epoch with the mean training loss.
    """
    if model.config.head != "sigmoid":
        raise ValueError("pre-training needs a model built with head='sigmoid'")
    if model.config.n_out != pairs.targets.shape[1]:
        raise ValueError(f"head has {model.config.n_out} outputs, targets have {pairs.targets.shape[1]}")
    if len(pairs) == 0:
        raise ValueError("no pre-training pairs")
    batch_all = stack_windows(pairs.windows)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    state = OptimizerState(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(len(pairs))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            with Graph() as g:
                logits = model.forward(batch_all.take(idx), training=True, rng=drop_rng)
                loss = ops.binary_cross_entropy(logits, pairs.targets[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteGradient(f"pre-training loss is {value} at epoch {epoch}, "
                                        f"batch starting at {s}")
            grads = g.backward(loss, wrt=list(model.params.values()))
            adam_step(state, model.params, {n: grads[p] for n, p in model.params.items()})
            losses.append(value * len(idx))
        entry = {"epoch": epoch, "loss": sum(losses) / len(order)}
        history.append(entry)
        log.info("pretrain epoch %d loss %.5f", epoch, entry["loss"])
        if on_epoch is not None:
            on_epoch(entry)
    return history


def transfer_weights(pretrained: Model, supervised: Model) -> Model:
    """Copy embedding and encoder weights; the supervised head stays as initialized."""
    a, b = pretrained.config, supervised.config
    if a.arch != b.arch:
        raise ValueError(f"architecture mismatch: pretrained {a.arch}, supervised {b.arch}")
    if pretrained.vocab is None or supervised.vocab is None:
        raise ValueError("both models must carry their vocabulary")
    if pretrained.vocab.hash() != supervised.vocab.hash():
        raise ValueError(f"vocabulary mismatch: {pretrained.vocab.hash()} != {supervised.vocab.hash()}")
    for name, p in pretrained.params.items():
        if name.startswith("head."):
            continue
        if name not in supervised.params or supervised.params[name].shape != p.shape:
            raise ValueError(f"encoder parameter {name} does not match the supervised model")
        supervised.params[name].data = p.data.copy()
    return supervised
