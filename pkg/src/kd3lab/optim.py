"""SGD-momentum / Adam over named numpy parameters, plus the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimConfig:
    kind: str = "sgd"  # "sgd" (momentum) or "adam"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # lr is divided by ten at each of these fractions of the epoch budget
    milestones: tuple = (0.625, 0.75, 0.875)

    def validate(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def lr_at(cfg: OptimConfig, epoch: int, total: int) -> float:
    drops = sum(epoch >= round(m * total) for m in cfg.milestones)
    return cfg.lr * 0.1**drops


class Optimizer:
    """Updates the given arrays in place; names not in ``params`` are never touched."""

    def __init__(self, params: dict[str, np.ndarray], cfg: OptimConfig):
        cfg.validate()
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if cfg.kind == "adam" else None

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        for name, p in self.params.items():  # insertion order: fixed update order
            g = grads.get(name)
            if g is None:
                continue
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.kind == "sgd":
                m = self.m[name]
                m *= cfg.momentum
                m += g
                p -= lr * m
            else:
                m, v = self.m[name], self.v[name]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1**self.t)
                vhat = v / (1 - cfg.beta2**self.t)
                p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
