"""AdamW with decoupled weight decay, and EMA parameter averaging.

Both updates are functional: they return new ParamSets and never mutate
their inputs, so snapshots of any training state stay valid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, StructuralError
from .params import ParamSet


@dataclass(frozen=True)
class AdamWState:
    m: ParamSet
    v: ParamSet
    t: int
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @staticmethod
    def init(params: ParamSet, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8, weight_decay: float = 0.01) -> "AdamWState":
        zeros = ParamSet({k: np.zeros_like(v) for k, v in params.items()})
        return AdamWState(m=zeros, v=zeros.copy(), t=0, lr=lr, beta1=beta1,
                          beta2=beta2, eps=eps, weight_decay=weight_decay)


def _require_aligned(a: ParamSet, b: ParamSet, what: str) -> None:
    if not a.aligned_with(b):
        raise StructuralError(f"{what}: segment names/shapes do not match")


def adamw_step(params: ParamSet, grads: ParamSet, state: AdamWState) -> tuple[ParamSet, AdamWState]:
    """One AdamW update. Weight decay is decoupled: applied to the parameter
    directly and scaled by lr, independent of the gradient moments."""
    _require_aligned(params, grads, "adamw_step grads")
    _require_aligned(params, state.m, "adamw_step state")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_p[name] = p - step - state.lr * state.weight_decay * p
        new_m[name] = m
        new_v[name] = v
    return ParamSet(new_p), replace(state, m=ParamSet(new_m), v=ParamSet(new_v), t=t)


def ema_update(target: ParamSet, online: ParamSet, rate: float) -> ParamSet:
    """target' = rate * target + (1 - rate) * online, element-wise."""
    if not (0.0 <= rate <= 1.0):
        raise ConfigError(f"ema rate must lie in [0, 1], got {rate}")
    _require_aligned(target, online, "ema_update")
    if rate == 1.0:
        return target.copy()
    if rate == 0.0:
        return online.copy()
    return ParamSet({k: rate * target[k] + (1.0 - rate) * online[k] for k in target})
