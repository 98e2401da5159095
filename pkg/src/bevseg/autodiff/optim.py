"""AdamW with decoupled weight decay.

The decay multiplies the parameter directly by ``(1 - lr * weight_decay)``
and is not folded into the gradient moments, so adaptive scaling never sees
it.  ``lr`` is a plain attribute that schedules may overwrite between steps.
"""

from __future__ import annotations

import numpy as np

from bevseg.autodiff.tensor import Tensor
from bevseg.errors import ConfigError


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        if weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue  # parameter did not participate in this step
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    # -- checkpointing ------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def state_meta(self) -> dict:
        return {"t": self.t, "lr": self.lr}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        for i in range(len(self.params)):
            m, v = arrays[f"m.{i}"], arrays[f"v.{i}"]
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise ValueError("optimizer state shape mismatch")
            self.m[i] = m.astype(self.m[i].dtype)
            self.v[i] = v.astype(self.v[i].dtype)
        self.t = int(meta["t"])
        self.lr = float(meta["lr"])
