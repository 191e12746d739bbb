"""Accuracy, rank-based AUC, ROC/PR curves, the acc@n protocol and a paired t-test."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

ALL = "all"


@dataclass
class ScoredDataset:
    y_true: np.ndarray  # (N,) class ids
    probs: np.ndarray  # (N, K)
    keys: list | None = None

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.y_true.shape[0]:
            raise ValueError(f"probabilities {self.probs.shape} do not match {self.y_true.shape[0]} labels")
        if self.y_true.size and (self.y_true.min() < 0 or self.y_true.max() >= self.probs.shape[1]):
            raise ValueError("true class id outside the probability vector")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


def accuracy(y_true, probs) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty set")
    return float((np.asarray(probs).argmax(axis=1) == y_true).mean())


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    _, inverse, counts = np.unique(np.asarray(x), return_inverse=True, return_counts=True)
    start = np.cumsum(counts) - counts
    return (start + (counts + 1) / 2.0)[inverse.ravel()]


def auc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + 0.5 P(tie), via rank sums."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(scored: ScoredDataset) -> dict[int, float]:
    out = {}
    for c in range(scored.n_classes):
        pos = scored.y_true == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has no positives or no negatives; skipped in macro AUC",
                          stacklevel=2)
            continue
        out[c] = auc(scored.probs[:, c], pos)
    return out


def macro_auc(scored: ScoredDataset) -> float:
    """Unweighted mean of one-vs-rest AUCs over classes that can be scored."""
    per = per_class_auc(scored)
    if not per:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(list(per.values())))


# -- curves ------------------------------------------------------------------------

def roc_points(scores, labels):
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # last index of each threshold
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    P, N = labels.sum(), (~labels).sum()
    return np.r_[0.0, fp / N], np.r_[0.0, tp / P]


def pr_points(scores, labels):
    """(recall, precision) by falling threshold, stopping once recall reaches 1.

    Starts at (0, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last].astype(np.float64)
    fp = np.cumsum(~y)[last].astype(np.float64)
    stop = int(np.searchsorted(tp, tp[-1])) + 1
    tp, fp = tp[:stop], fp[:stop]
    return np.r_[0.0, tp / tp[-1]], np.r_[1.0, tp / (tp + fp)]


def _interp_roc(fpr, tpr, grid):
    # highest TPR reachable at each FPR budget
    idx = np.searchsorted(fpr, grid, side="right") - 1
    return np.maximum.accumulate(tpr)[idx]


def _interp_pr(recall, precision, grid):
    # interpolated precision: best precision at recall >= r
    best = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.minimum(np.searchsorted(recall, grid, side="left"), recall.size - 1)
    return best[idx]


def curves(scored: ScoredDataset, class_id: int, bootstrap: int = 30, seed: int = 0,
           grid_size: int = 50) -> dict:
    """ROC and PR curves for one class with bootstrap standard errors.

    The ROC grid is log-spaced in FPR from 1/#negatives to 1; the PR grid is
    linear in recall. Standard errors are the standard deviation of the
    interpolated curves over ``bootstrap`` instance resamples.
    """
    labels = scored.y_true == class_id
    scores = scored.probs[:, class_id]
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"class {class_id} needs positives and negatives for curves")
    roc_grid = np.geomspace(1.0 / n_neg, 1.0, grid_size)
    pr_grid = np.linspace(0.0, 1.0, grid_size)
    fpr, tpr = roc_points(scores, labels)
    rec, prec = pr_points(scores, labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41, class_id]))
    roc_bs, pr_bs, auc_bs = [], [], []
    n = labels.size
    while len(roc_bs) < bootstrap:
        idx = rng.integers(0, n, n)
        lb = labels[idx]
        if lb.all() or not lb.any():
            continue
        f, t = roc_points(scores[idx], lb)
        r, p = pr_points(scores[idx], lb)
        roc_bs.append(_interp_roc(f, t, roc_grid))
        pr_bs.append(_interp_pr(r, p, pr_grid))
        auc_bs.append(auc(scores[idx], lb))
    ddof = 1 if bootstrap > 1 else 0
    return {
        "class": int(class_id),
        "auc": auc(scores, labels),
        "auc_stderr": float(np.std(auc_bs, ddof=ddof)) if auc_bs else 0.0,
        "roc_points": (fpr, tpr),
        "pr_points": (rec, prec),
        "roc": (roc_grid, _interp_roc(fpr, tpr, roc_grid),
                np.std(roc_bs, axis=0, ddof=ddof) if roc_bs else np.zeros_like(roc_grid)),
        "pr": (pr_grid, _interp_pr(rec, prec, pr_grid),
               np.std(pr_bs, axis=0, ddof=ddof) if pr_bs else np.zeros_like(pr_grid)),
    }


def write_curves_csv(curve_list: list[dict], fh, class_names=None) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["class", "curve_type", "x", "y", "stderr"])
    for cv in curve_list:
        name = class_names[cv["class"]] if class_names else cv["class"]
        for kind in ("roc", "pr"):
            xs, ys, se = cv[kind]
            for x, y, e in zip(xs, ys, se):
                writer.writerow([name, kind, repr(float(x)), repr(float(y)), repr(float(e))])


# -- few-shot protocol -------------------------------------------------------------

def at_n_protocol(fit_predict, test_y, n_values=(10, 50, 100, ALL),
                  repeats: int = 5, seed: int = 0, on_run=None) -> list[dict]:
    """acc@n and AUC@n averaged over ``repeats`` seeded draws per n.

    ``fit_predict(n, run_seed)`` trains on at most n instances per class
    (None meaning all of them) and returns test probabilities. The "all"
    row is a single run since every repeat would see the same data.
    """
    rows = []
    for n in n_values:
        full = n == ALL or n is None
        runs = 1 if full else repeats
        accs, aucs = [], []
        for r in range(runs):
            run_seed = seed + r
            probs = fit_predict(None if full else int(n), run_seed)
            scored = ScoredDataset(test_y, probs)
            accs.append(accuracy(test_y, probs))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                aucs.append(macro_auc(scored))
            if on_run is not None:
                on_run(n, r, accs[-1], aucs[-1])
        rows.append({"n": ALL if full else int(n), "repeats": runs, "acc": accs, "auc": aucs,
                     "acc_mean": float(np.mean(accs)), "auc_mean": float(np.mean(aucs))})
    return rows


# -- paired t-test -------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the continued fraction converges fast on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def paired_significance(a, b, alpha: float = 0.05):
    """Two-sided paired t-test of a against b: (t, p, p < alpha).

    When every difference is equal the variance is zero: p is 1 if the mean
    difference is zero and 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired samples must be equal-length 1-d sequences of length >= 2")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0, False
        t = math.copysign(math.inf, mean)
        return t, 0.0, True
    t = float(mean / (sd / math.sqrt(n)))
    p = t_two_sided_p(t, n - 1)
    return t, p, p < alpha


def summary(task: str, model_name: str, scored: ScoredDataset, class_names=None,
            at_n=None, significance=None) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per = per_class_auc(scored)
    names = class_names or [str(c) for c in range(scored.n_classes)]
    out = {
        "task": task,
        "model": model_name,
        "n_instances": int(scored.y_true.size),
        "acc": accuracy(scored.y_true, scored.probs),
        "macro_auc": float(np.mean(list(per.values()))) if per else None,
        "per_class_auc": {names[c]: v for c, v in per.items()},
    }
    if at_n is not None:
        out["at_n"] = at_n
    if significance is not None:
        out["significance"] = significance
    return out
