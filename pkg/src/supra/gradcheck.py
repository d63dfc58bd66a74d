"""Central finite-difference gradient checks against the tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, idx=None) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored.

    ``idx`` optionally restricts to a list of flat indices (others are left 0).
    """
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in (range(x.size) if idx is None else idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_tensors(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-5,
                  max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-tensor relative error between tape gradients and finite differences."""
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}

    def f():
        with T.no_grad():
            return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    out = {}
    for name, t in tensors.items():
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, max_entries, replace=False)
        num = numeric_grad(f, t.data, h, idx)
        a = analytic[name]
        if idx is not None:
            mask = np.zeros(t.size, dtype=bool)
            mask[idx] = True
            a = np.where(mask.reshape(t.shape), a, 0.0)
        out[name] = rel_err(a, num)
    return out
