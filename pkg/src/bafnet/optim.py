"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    """Training cannot continue (e.g. a non-finite gradient)."""


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    def __init__(self, named_params, lr=3e-4, beta1=0.9, beta2=0.99, eps=1e-8, clip_norm: float = 0.0):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.state = AdamState(lr, beta1, beta2, eps)
        self.clip_norm = clip_norm
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                                 for _, p in self.params if p.grad is not None)))

    def step(self) -> None:
        s = self.state
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            m, v = s.m[name], s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.data -= (s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)).astype(p.data.dtype)

    # checkpoint helpers
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"adam.m.{name}"] = self.state.m[name]
            out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for name, _ in self.params:
            self.state.m[name][...] = tensors[f"adam.m.{name}"]
            self.state.v[name][...] = tensors[f"adam.v.{name}"]
        self.state.step = step


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """Functional form: update ``params`` in place from their ``.grad`` and return the state."""
    opt = Adam.__new__(Adam)
    opt.params = list(params.items())
    opt.state = state
    opt.clip_norm = 0.0
    for name, p in opt.params:
        state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros_like(p.data))
    opt.step()
    return state
