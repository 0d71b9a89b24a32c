"""Optimizers (SGD with momentum, AdamW) over named learnable tensors, plus
the linear-warmup-then-cosine learning-rate schedule used by both phases."""

from __future__ import annotations

import math

import numpy as np


def warmup_cosine_lr(step, total_steps, base_lr, warmup_steps, start_factor=0.02,
                     min_lr=0.0):
    """Linear ramp from start_factor*base_lr to base_lr over `warmup_steps`,
    then cosine decay to `min_lr` at `total_steps`."""
    if warmup_steps > 0 and step < warmup_steps:
        frac = step / warmup_steps
        return base_lr * (start_factor + (1.0 - start_factor) * frac)
    if total_steps <= warmup_steps:
        return base_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    t = min(max(t, 0.0), 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


class SGD:
    """Momentum SGD with decoupled weight decay, applied only to tensors the
    freeze mask left learnable."""

    def __init__(self, named_params, lr, momentum=0.9, weight_decay=0.0):
        self.params = [(n, t) for n, t in named_params if t.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(t.data) for n, t in self.params}

    def step(self):
        for n, t in self.params:
            if t.grad is None:
                g = np.zeros_like(t.data)
            else:
                g = t.grad
            v = self.velocity[n]
            v *= self.momentum
            v += g
            if self.weight_decay:
                t.data = t.data - self.lr * self.weight_decay * t.data
            t.data = t.data - self.lr * v

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()


class AdamW:
    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = [(n, t) for n, t in named_params if t.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for n, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self.m[n]
            v = self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                t.data = t.data - self.lr * self.weight_decay * t.data
            t.data = t.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()
