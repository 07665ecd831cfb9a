"""SGD with momentum and Adam, updating model parameters in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradientError


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.kind == "adam":
            if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.eps <= 0:
                raise ValueError("adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        elif self.momentum < 0:
            raise ValueError("momentum must be >= 0")


def sgd(lr, momentum=0.0) -> OptimizerState:
    return OptimizerState("sgd", lr=lr, momentum=momentum)


def adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState("adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(state: OptimizerState, model, grads) -> None:
    for i, name, p in model.parameters():
        g = grads[i][name]
        if g.shape != p.shape:
            raise ValueError(f"layer {i} {name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(f"layer {i} {name}: {bad} non-finite gradient values at step {state.step + 1}")

    state.step += 1
    t = state.step
    for i, name, p in model.parameters():
        g = grads[i][name]
        key = (i, name)
        if state.kind == "sgd":
            if state.momentum:
                buf = state.moments.get(key)
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.moments[key] = buf
                g = buf
            p -= state.lr * g
        else:
            m, v = state.moments.get(key, (np.zeros_like(p), np.zeros_like(p)))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            state.moments[key] = (m, v)
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    model.generation += 1
