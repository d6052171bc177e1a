"""Adam optimizer with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import GradientError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


_CHUNK = 1 << 15  # elements per pass; keeps float64 temporaries cache-resident


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update of ``params``; moments are kept in float64.

    Raises
    ------
    GradientError
        If any parameter has no gradient. Nothing is updated in that case.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GradientError(f"missing gradient for {', '.join(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_corr2 = 1.0 / (1.0 - b2 ** t)
    tmp = np.empty(_CHUNK, dtype=np.float64)
    sq = np.empty(_CHUNK, dtype=np.float64)
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m = state.m[name].reshape(-1)
        v = state.v[name].reshape(-1)
        g = p.grad.reshape(-1)
        w = p.data.reshape(-1)
        for lo in range(0, w.size, _CHUNK):
            hi = min(lo + _CHUNK, w.size)
            gt, st = tmp[:hi - lo], sq[:hi - lo]
            gt[...] = g[lo:hi]
            mc, vc = m[lo:hi], v[lo:hi]
            mc *= b1
            mc += (1.0 - b1) * gt
            np.multiply(gt, gt, out=st)
            vc *= b2
            st *= 1.0 - b2
            vc += st
            np.multiply(vc, inv_corr2, out=st)
            np.sqrt(st, out=st)
            st += state.eps
            np.divide(mc, st, out=st)
            st *= step_size
            w[lo:hi] -= st


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
