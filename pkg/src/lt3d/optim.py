"""AdamW with a step-decay learning-rate schedule."""
from __future__ import annotations

import numpy as np


def step_decay_lr(lr0, epoch, every=100, rate=0.5):
    """Rate for 1-indexed ``epoch``: multiplied by ``rate`` after every ``every`` epochs."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-indexed, got {epoch}")
    return lr0 * rate ** ((epoch - 1) // every)


class AdamW:
    """Adam with decoupled weight decay, applied in place to ``Tensor.data``."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, scale=1.0):
        """One update using ``scale * grad`` (missing grads count as zero)."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if scale != 1.0:
                g = g * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        out["optim.step"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, tensors):
        for k in self.params:
            self.m[k] = np.array(tensors[f"optim.m.{k}"], dtype=self.m[k].dtype).reshape(self.m[k].shape)
            self.v[k] = np.array(tensors[f"optim.v.{k}"], dtype=self.v[k].dtype).reshape(self.v[k].shape)
        self.t = int(tensors["optim.step"][0])
