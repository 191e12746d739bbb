"""Adam and Glorot initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def glorot_init(shape, seed, dtype=np.float32) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    Fans follow the Keras convention: for rank >= 3 the leading axes are the
    receptive field, so a (k, C, F) conv kernel has fan_in k*C and fan_out k*F.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1:
        raise ValueError("glorot_init: rank must be >= 1")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(state: OptimizerState, params: dict[str, Tensor],
              grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, in place on ``params``.

    ``grads`` maps parameter names to gradients; parameters without an entry
    are left untouched but the step counter still advances once per call.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"adam_step: non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        state.m[name] = m
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
