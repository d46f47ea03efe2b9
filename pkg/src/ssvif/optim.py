"""Adam with bias correction over a :class:`ParamRegistry`.

Step counts are kept per parameter, so a group that starts training late
(the segmentation networks, after the stage switch) gets the same bias
correction as one that trained from the start.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .models import ParamRegistry


class Adam:
    def __init__(self, registry: ParamRegistry, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.registry = registry
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(t.data) for n, t in registry.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in registry.items()}
        self.steps = {n: 0 for n in registry.names()}

    def step(self, groups) -> None:
        """Update the parameters of ``groups`` from their grads, then clear those grads."""
        params = self.registry.group(*groups)
        if not params:
            raise ContractError(f"no parameters in groups {tuple(groups)}")
        for name, p in params:
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
        b1, b2 = self.beta1, self.beta2
        for name, p in params:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            self.steps[name] += 1
            t = self.steps[name]
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.registry.names():
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def state_meta(self) -> dict[str, str]:
        return {f"adam.step.{name}": str(t) for name, t in self.steps.items()}

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
        for name in self.registry.names():
            for kind, buf in (("m", self.m), ("v", self.v)):
                key = f"adam.{kind}.{name}"
                if key not in tensors:
                    raise ContractError(f"optimizer state lacks {key}")
                buf[name][...] = tensors[key]
            self.steps[name] = int(meta.get(f"adam.step.{name}", "0"))
