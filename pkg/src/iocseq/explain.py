"""Integrated-gradients attributions over event embeddings.

The baseline replaces every event embedding with zeros and keeps the numeric
features, so numeric attributions are exactly zero and only events can be
flagged. F is the softmax probability of the target class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .models import Model, argmax_lowest
from .ndcore import Graph, Tensor, ops
from .telemetry import PAD_ID, WindowBatch, WindowInstance, stack_windows

NUMERIC_NAMES = ("log_dt", "log_sent", "log_recv")


def riemann_ig(grad_fn, x: np.ndarray, baseline: np.ndarray, steps: int) -> np.ndarray:
    """(x - x') * mean_k grad F(x' + k/m (x - x')) for k = 1..m.

    ``grad_fn`` maps a stack of points (m, *x.shape) to their gradients.
    """
    if steps < 1:
        raise ValueError("integrated gradients needs at least one step")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    diff = x - baseline
    points = baseline[None] + alphas.reshape((-1,) + (1,) * x.ndim) * diff[None]
    grads = np.asarray(grad_fn(points), dtype=np.float64)
    return diff * grads.mean(axis=0)


@dataclass
class AttributionReport:
    key: tuple
    target: int
    predicted: int
    probability: float  # of the predicted class
    f_input: float
    f_baseline: float
    steps: int
    events: list  # (step, event id, event name, importance) per real occurrence
    numeric: list  # (step, feature, importance) per real step
    class_name: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(e[3] for e in self.events) + sum(n[2] for n in self.numeric))

    def to_json(self) -> dict:
        return {
            "key": list(self.key),
            "target": self.target,
            "class_name": self.class_name,
            "predicted": self.predicted,
            "probability": self.probability,
            "f_input": self.f_input,
            "f_baseline": self.f_baseline,
            "steps": self.steps,
            "completeness_gap": completeness_gap(self),
            "events": [{"step": t, "event_id": e, "event": n, "importance": v}
                       for t, e, n, v in self.events],
            "numeric": [{"step": t, "feature": f, "importance": v} for t, f, v in self.numeric],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttributionReport":
        return cls(tuple(obj["key"]), obj["target"], obj["predicted"], obj["probability"],
                   obj["f_input"], obj["f_baseline"], obj["steps"],
                   [(e["step"], e["event_id"], e["event"], e["importance"]) for e in obj["events"]],
                   [(n["step"], n["feature"], n["importance"]) for n in obj["numeric"]],
                   obj.get("class_name"))


def _check_model(model) -> None:
    if not isinstance(model, Model):
        raise TypeError(f"{type(model).__name__} is not differentiable; "
                        "integrated gradients need a neural model")
    if model.config.head != "softmax":
        raise ValueError("integrated gradients need a classification model")


def _target_probability(model: Model, batch: WindowBatch, emb: np.ndarray, targets: np.ndarray,
                        want_grad: bool):
    """Target-class probabilities and, optionally, their gradients w.r.t. ``emb``."""
    e = Tensor(emb, requires_grad=want_grad)
    with Graph() as g:
        probs = ops.softmax(model.forward(batch, embeddings=e))
        picked = ops.sum(ops.mul(probs, np.eye(probs.shape[1], dtype=probs.dtype)[targets]))
    if not want_grad:
        return probs.data[np.arange(len(targets)), targets], None
    grad = g.backward(picked, wrt=[e])[e]
    return probs.data[np.arange(len(targets)), targets], grad


def _repeat(batch: WindowBatch, reps: int) -> WindowBatch:
    return WindowBatch(np.repeat(batch.event_ids, reps, axis=0),
                       np.repeat(batch.event_mask, reps, axis=0),
                       np.repeat(batch.numerics, reps, axis=0),
                       np.repeat(batch.pad_mask, reps, axis=0))


def embedding_attributions(model: Model, batch: WindowBatch, targets, steps: int = 300,
                           max_rows: int = 600):
    """Per-coordinate IG on the gathered embeddings for every window in ``batch``.

    Returns (attributions (N, w, S, D), F(x) (N,), F(x') (N,)). Each window's
    m interpolation points run as one batch (split when above ``max_rows``).
    """
    _check_model(model)
    if steps < 1:
        raise ValueError("integrated gradients needs at least one step")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= model.config.n_out:
        raise ValueError(f"target class outside 0..{model.config.n_out - 1}")
    emb = model.embed(batch.event_ids).data
    emb = emb * batch.event_mask[..., None]  # unused set slots never contribute
    f_x, _ = _target_probability(model, batch, emb, targets, False)
    f_base, _ = _target_probability(model, batch, np.zeros_like(emb), targets, False)
    out = np.zeros(emb.shape, dtype=np.float64)
    per_row = max(1, min(steps, max_rows))
    for n in range(len(batch)):
        one = batch.take([n])
        S = one.event_ids.shape[2]
        x = emb[n:n + 1, :, :S]

        def grad_fn(points, one=one, tgt=targets[n]):
            grads = []
            for s in range(0, points.shape[0], per_row):
                chunk = points[s:s + per_row].astype(emb.dtype)
                reps = chunk.shape[0]
                _, gr = _target_probability(model, _repeat(one, reps), chunk[:, 0],
                                            np.full(reps, tgt), True)
                grads.append(gr[:, None])
            return np.concatenate(grads, axis=0)

        out[n, :, :S] = riemann_ig(grad_fn, x, np.zeros_like(x), steps)[0]
    return out, f_x, f_base


def integrated_gradients(model: Model, instance: WindowInstance, target: int | None = None,
                         steps: int = 300) -> AttributionReport:
    """Attribution report for one window; ``target`` defaults to the predicted class."""
    _check_model(model)
    batch = stack_windows([instance])
    probs = model.predict_proba(batch)[0]
    predicted = argmax_lowest(probs)
    target = predicted if target is None else int(target)
    attr, f_x, f_base = embedding_attributions(model, batch, [target], steps)
    per_event = attr[0].sum(axis=-1)
    vocab = model.vocab
    events, numeric = [], []
    for t, (step, real) in enumerate(zip(instance.steps, instance.pad_mask)):
        if not real:
            continue
        for s, e in enumerate(step.event_ids):
            name = vocab.name(e) if vocab is not None else str(e)
            events.append((t, int(e), name, float(per_event[t, s])))
        for f in NUMERIC_NAMES:
            numeric.append((t, f, 0.0))
    class_name = model.classes[target] if model.classes else None
    return AttributionReport(tuple(instance.key), target, predicted, float(probs[predicted]),
                             float(f_x[0]), float(f_base[0]), steps, events, numeric, class_name)


def completeness_gap(report: AttributionReport) -> float:
    """|sum of attributions - (F(x) - F(x'))|."""
    return abs(report.total - (report.f_input - report.f_baseline))


def completeness_check(report: AttributionReport, model: Model, instance: WindowInstance) -> float:
    """Gap recomputed against fresh evaluations of F at the input and the baseline."""
    batch = stack_windows([instance])
    emb = model.embed(batch.event_ids).data * batch.event_mask[..., None]
    tgt = np.array([report.target])
    f_x, _ = _target_probability(model, batch, emb, tgt, False)
    f_b, _ = _target_probability(model, batch, np.zeros_like(emb), tgt, False)
    return abs(report.total - float(f_x[0] - f_b[0]))


# -- per-family aggregation -----------------------------------------------------------

@dataclass
class FamilyImportance:
    class_id: int
    class_name: str | None
    n_instances: int
    rows: list  # (event name, mean, std, count) sorted by mean, descending

    def top(self, k: int = 10) -> list:
        return self.rows[:k]

    def to_json(self) -> dict:
        return {"class_id": self.class_id, "class_name": self.class_name,
                "n_instances": self.n_instances,
                "events": [{"event": n, "mean": m, "std": s, "count": c}
                           for n, m, s, c in self.rows]}

    @classmethod
    def from_json(cls, obj: dict) -> "FamilyImportance":
        return cls(obj["class_id"], obj.get("class_name"), obj["n_instances"],
                   [(e["event"], e["mean"], e["std"], e["count"]) for e in obj["events"]])


def instance_event_sums(model: Model, attr: np.ndarray, batch: WindowBatch) -> list[dict]:
    """Per window: event name -> importance summed over all its occurrences."""
    out = []
    per_occ = attr.sum(axis=-1)
    for n in range(len(batch)):
        sums = {}
        ids = batch.event_ids[n]
        real = (batch.event_mask[n] > 0) & batch.pad_mask[n][:, None] & (ids != PAD_ID)
        for t, s in zip(*np.nonzero(real)):
            name = model.vocab.name(int(ids[t, s])) if model.vocab else str(int(ids[t, s]))
            sums[name] = sums.get(name, 0.0) + float(per_occ[n, t, s])
        out.append(sums)
    return out


def family_importance(model: Model, instances: list[WindowInstance], class_id: int,
                      steps: int = 300, max_instances: int | None = None,
                      seed: int = 0) -> FamilyImportance:
    """Mean and spread of per-event importance over windows predicted as ``class_id``.

    An event missing from a window counts as zero importance there; ``count``
    is the number of windows that contain it. With ``max_instances`` a seeded
    subset of the positive windows is used.
    """
    _check_model(model)
    batch = stack_windows(instances) if instances else None
    if batch is None:
        raise ValueError("no instances given")
    pred = model.predict_proba(batch).argmax(axis=1)
    pos = np.flatnonzero(pred == class_id)
    if pos.size == 0:
        raise ValueError(f"no instance is classified as class {class_id}")
    if max_instances is not None and pos.size > max_instances:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 61]))
        pos = np.sort(rng.choice(pos, max_instances, replace=False))
    sub = batch.take(pos)
    attr, _, _ = embedding_attributions(model, sub, np.full(pos.size, class_id), steps)
    sums = instance_event_sums(model, attr, sub)
    names = sorted({n for s in sums for n in s})
    mat = np.array([[s.get(n, 0.0) for n in names] for s in sums], dtype=np.float64)
    means = mat.mean(axis=0)
    stds = mat.std(axis=0)
    counts = [sum(1 for s in sums if n in s) for n in names]
    rows = sorted(zip(names, means.tolist(), stds.tolist(), counts), key=lambda r: (-r[1], r[0]))
    class_name = model.classes[class_id] if model.classes else None
    return FamilyImportance(int(class_id), class_name, int(pos.size), rows)


# -- rendering ------------------------------------------------------------------

def _normalize(values) -> np.ndarray:
    """Scale so the largest importance maps to 1; non-positive values map to 0."""
    v = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    top = v.max(initial=0.0)
    return v / top if top > 0 else np.zeros_like(v)


def render_report(report) -> tuple[str, dict]:
    """Text table with max-normalized importance, plus the raw JSON payload."""
    if isinstance(report, FamilyImportance):
        rows = report.top(10)
        norm = _normalize([r[1] for r in rows])
        title = report.class_name if report.class_name is not None else report.class_id
        lines = [f"class {title}: {report.n_instances} positively classified windows",
                 f"{'event':<40} {'norm':>6} {'mean':>11} {'std':>11} {'count':>6}"]
        for (name, mean, std, count), z in zip(rows, norm):
            lines.append(f"{name:<40} {z:6.3f} {mean:11.4g} {std:11.4g} {count:6d}")
        return "\n".join(lines) + "\n", report.to_json()
    norm = _normalize([e[3] for e in report.events])
    title = report.class_name if report.class_name is not None else report.target
    lines = [f"window {report.key}: target {title}, F(x)={report.f_input:.4f}, "
             f"F(baseline)={report.f_baseline:.4f}, gap={completeness_gap(report):.2e}",
             f"{'step':>4} {'event':<40} {'norm':>6} {'importance':>12}"]
    for (t, _, name, v), z in zip(report.events, norm):
        lines.append(f"{t:4d} {name:<40} {z:6.3f} {v:12.4g}")
    return "\n".join(lines) + "\n", report.to_json()


def dumps_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
