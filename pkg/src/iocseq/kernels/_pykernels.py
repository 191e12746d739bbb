"""Numpy reference versions of the compiled kernels."""

import numpy as np


def scatter_add_rows(out, ids, src):
    if src.shape[0] != ids.shape[0] or out.shape[1] != src.shape[1]:
        raise ValueError("scatter_add_rows: shape mismatch")
    np.add.at(out, ids, src)


def best_gini_split(X, y, sample_idx, features, n_classes):
    n = sample_idx.shape[0]
    if n == 0:
        return -1, float("nan"), 0.0
    ys = y[sample_idx]
    total = np.bincount(ys, minlength=n_classes).astype(np.float64)
    parent_score = float((total * total).sum()) / n
    best_score = parent_score
    best_feat, best_thr = -1, float("nan")
    onehot = np.zeros((n, n_classes), dtype=np.float64)
    sub = X[sample_idx]
    for f in features:
        vals = sub[:, f]
        if vals.min() == vals.max():
            continue
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        onehot[:] = 0.0
        onehot[np.arange(n), ys[order]] = 1.0
        left = np.cumsum(onehot, axis=0)[:-1]
        right = total - left
        valid = sv[:-1] != sv[1:]
        if not valid.any():
            continue
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        score = (left * left).sum(axis=1) / nl + (right * right).sum(axis=1) / nr
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = float(score[i])
            best_feat = int(f)
            best_thr = (float(sv[i]) + float(sv[i + 1])) / 2.0
    return best_feat, best_thr, best_score
