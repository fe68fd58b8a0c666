"""AdamW with decoupled weight decay, deterministic given its state."""

from __future__ import annotations

import numpy as np


class MissingGradientError(RuntimeError):
    pass


class AdamW:
    """Standard AdamW over a dict of named parameter tensors.

    m/v moments are kept per parameter in the parameter dtype; `lr` may be
    reassigned between steps for schedules.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter '{name}' has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= self.lr * (m / bc1) / denom

    def state_arrays(self, prefix="adamw"):
        """Moment arrays + step counter for exact training resume."""
        out = {f"{prefix}.step": np.array([self.step_count], dtype=np.int64)}
        for n in self.params:
            out[f"{prefix}.m.{n}"] = self.m[n]
            out[f"{prefix}.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays, prefix="adamw"):
        self.step_count = int(arrays[f"{prefix}.step"][0])
        for n in self.params:
            self.m[n] = arrays[f"{prefix}.m.{n}"].astype(self.m[n].dtype, copy=True)
            self.v[n] = arrays[f"{prefix}.v.{n}"].astype(self.v[n].dtype, copy=True)
