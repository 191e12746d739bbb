"""Finite-difference gradient checking.

The analytic side runs the op in float32 and back-propagates through the
tape; the oracle re-runs the same op in float64 and takes central
differences. A fixed random projection turns any output into a scalar.
"""

from __future__ import annotations

import numpy as np

from .ops import add, mul, sum as tsum
from .tensor import Graph, Tensor


def _scalarize(out, proj, dtype):
    outs = out if isinstance(out, tuple) else (out,)
    total = None
    for o, r in zip(outs, proj):
        term = tsum(mul(o, r.astype(dtype)))
        total = term if total is None else add(total, term)
    return total


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor * max|n|, 1e-6)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(n).max(initial=0.0)) * floor, 1e-6)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def check_gradients(fn, inputs: "list[np.ndarray]", diff: "list[bool] | None" = None,
                    step: float = 1e-3, seed: int = 0) -> "list[float]":
    """Compare tape gradients of ``fn(*tensors)`` against central differences.

    ``fn`` receives Tensors built from ``inputs`` and returns a Tensor or a
    tuple of Tensors. Returns one max relative error per differentiable input.
    """
    diff = [True] * len(inputs) if diff is None else diff
    rng = np.random.default_rng(seed)

    def run(dtype, arrays, requires):
        ts = [Tensor(a, requires_grad=r, dtype=dtype) for a, r in zip(arrays, requires)]
        return ts, fn(*ts)

    # projection shapes come from a probe forward pass
    _, probe = run(np.float64, inputs, [False] * len(inputs))
    probe = probe if isinstance(probe, tuple) else (probe,)
    proj = [np.asarray(rng.standard_normal(p.shape)) for p in probe]

    with Graph() as g:
        ts, out = run(np.float32, inputs, diff)
        loss = _scalarize(out, proj, np.float32)
    grads = g.backward(loss, wrt=[t for t, d in zip(ts, diff) if d])
    analytic = [grads[t] for t, d in zip(ts, diff) if d]

    def f64(arrays):
        _, o = run(np.float64, arrays, [False] * len(arrays))
        return float(_scalarize(o, proj, np.float64).data.reshape(-1)[0])

    errors = []
    k = 0
    for i, (arr, d) in enumerate(zip(inputs, diff)):
        if not d:
            continue
        base = [np.asarray(a, dtype=np.float64).copy() for a in inputs]
        numeric = np.zeros(arr.shape, dtype=np.float64)
        flat = base[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = f64(base)
            flat[j] = orig - step
            down = f64(base)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * step)
        errors.append(relative_error(analytic[k], numeric))
        k += 1
    return errors
