"""Minimal optimizers over numpy arrays, with per-group learning rates."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over parameter groups: [{"params": [ndarray, ...], "lr": float}].

    Arrays are updated in place; gradients are passed to step() in the same
    nested structure as the groups.
    """

    def __init__(self, param_groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = param_groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p, dtype=np.float64) for p in g["params"]] for g in param_groups]
        self.v = [[np.zeros_like(p, dtype=np.float64) for p in g["params"]] for g in param_groups]

    def step(self, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for gi, group in enumerate(self.groups):
            lr = group["lr"]
            for pi, p in enumerate(group["params"]):
                grad = np.asarray(grads[gi][pi], dtype=np.float64)
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p -= update.astype(p.dtype) if p.dtype != np.float64 else update


class SGD:
    """Plain SGD over parameter groups (no momentum)."""

    def __init__(self, param_groups):
        self.groups = param_groups

    def step(self, grads) -> None:
        for gi, group in enumerate(self.groups):
            lr = group["lr"]
            for pi, p in enumerate(group["params"]):
                grad = np.asarray(grads[gi][pi], dtype=np.float64)
                p -= (lr * grad).astype(p.dtype) if p.dtype != np.float64 else lr * grad
