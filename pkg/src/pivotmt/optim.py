"""Adam with a linear warm-up learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class WarmupSchedule:
    """lr rises linearly from ``lr_min`` (step 0) to ``lr_max`` (step ``warmup``), then stays."""

    lr_min: float = 1e-7
    lr_max: float = 1e-4
    warmup: int = 100

    @classmethod
    def published(cls, warmup: int = 4000) -> "WarmupSchedule":
        """The large-scale preset: 1e-7 rising to 1e-5."""
        return cls(1e-7, 1e-5, warmup)

    def __call__(self, step: int) -> float:
        if self.warmup <= 0 or step >= self.warmup:
            return self.lr_max
        return self.lr_min + (self.lr_max - self.lr_min) * step / self.warmup

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Parameters whose ``grad`` is None are skipped; their moments stay put.
    """

    def __init__(self, params: list[Tensor], schedule: WarmupSchedule | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.schedule = schedule or WarmupSchedule()
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> float:
        """Apply one update at the current scheduled lr; returns that lr."""
        lr = self.schedule(self.step_count)
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]
