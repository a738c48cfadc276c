"""Finite-difference gradient checking.

The analytic gradient is computed in float32 as in training; the numerical
reference re-runs the same function on float64 copies with central
differences, so rounding noise in the reference stays far below the
tolerances being tested.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], wrt: int,
                   h: float = 1e-3, indices: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` w.r.t. ``inputs[wrt]`` (float64)."""
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    target = xs[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*[Tensor(x) for x in xs]).data)
        flat[i] = orig - h
        fm = float(fn(*[Tensor(x) for x in xs]).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              max_probes: int | None = None, seed: int = 0) -> float:
    """Largest normwise relative error over all inputs.

    For each input the error is ``max|analytic - numeric| / max|numeric|``.
    ``max_probes`` limits how many elements per input are perturbed.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float32), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        idx = None
        if max_probes is not None and t.size > max_probes:
            idx = np.sort(rng.choice(t.size, size=max_probes, replace=False))
        numeric = numerical_grad(fn, inputs, k, h=h, indices=idx)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        scale = max(np.abs(n).max(initial=0.0), 1e-6)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0) / scale))
    return worst
