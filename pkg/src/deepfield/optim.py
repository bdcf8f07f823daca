"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

Update per parameter (bias-corrected first/second moments):

    m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
    p <- p - lr*wd*p - lr*(m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)

Decay is applied to the parameter value directly, not folded into the
gradient. Non-finite gradients abort the step with an error so the caller
can report which iteration went bad.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(RuntimeError):
    """Raised when a gradient contains NaN/Inf; the step is not applied."""


def cosine_lr(step: int, total_steps: int,
              lr_start: float = 2e-3, lr_end: float = 1e-3) -> float:
    """Half-cosine decay from lr_start at step 0 to lr_end at total_steps.

    Steps past the end clamp to lr_end.
    """
    if total_steps <= 0:
        return lr_end
    t = min(max(step, 0), total_steps) / total_steps
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Keeps one (m, v) pair per named parameter; `t` is shared.

    `params` maps names to leaf tensors. Names key the optimizer state in
    checkpoints, so they must be stable across runs.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-8,
                 weight_decay: float = 0.2):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """Apply one update. Raises NonFiniteGradient before touching any
        parameter if any gradient has a NaN or Inf."""
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient in '{name}'")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    # -- checkpoint plumbing -------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for name in self.params:
            self.m[name] = np.array(tensors[f"opt.m.{name}"])
            self.v[name] = np.array(tensors[f"opt.v.{name}"])
