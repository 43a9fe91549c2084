from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .nn import ParamSet
from .tape import NumericError


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


def adam_step(
    params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState, lr: float
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}", name)
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    new_state = AdamState(new_m, new_v, step, b1, b2, state.eps)
    return params.replace(new_p), new_state


def lr_schedule(
    iteration: int,
    warmup_iters: int = 5000,
    total_iters: int = 200_000,
    lr_max: float = 5e-4,
    lr_min: float = 2.5e-5,
) -> float:
    """Linear warm-up from 0 to ``lr_max``, then cosine decay to ``lr_min``."""
    it = min(max(int(iteration), 0), total_iters)
    if warmup_iters > 0 and it <= warmup_iters:
        return lr_max * it / warmup_iters
    span = max(total_iters - warmup_iters, 1)
    progress = (it - warmup_iters) / span
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
