"""Optimizers and the warmup + cosine learning-rate schedule."""
import math

import numpy as np

from .errors import ContractError, ConfigError, NumericError

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
ADAMW_DECAY = 0.01
OPTIMIZERS = ("sgd", "adam", "adamw")


def lr_at(step, total_steps, base_lr, warmup_fraction=0.1):
    """Linear ramp from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup_fraction < 1:
        raise ContractError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction}")
    warm = warmup_fraction * total_steps
    if step < warm:
        return base_lr * step / warm
    progress = (step - warm) / (total_steps - warm)
    return base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0


def optimizer_step(kind, params, grads, state, lr, decay_mask=None):
    """One update; returns ``(new_params, new_state)`` without mutating inputs.

    ``state`` is ``{}`` before the first step.  AdamW applies decoupled
    weight decay only where ``decay_mask`` is true.
    """
    if kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {kind!r}; expected one of {', '.join(OPTIMIZERS)}")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i}; step aborted")
    if kind == "sgd":
        return [p - lr * g for p, g in zip(params, grads)], dict(state)
    t = state.get("t", 0) + 1
    m_prev = state.get("m") or [np.zeros_like(p) for p in params]
    v_prev = state.get("v") or [np.zeros_like(p) for p in params]
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = BETA1 * m_prev[i] + (1.0 - BETA1) * g
        v = BETA2 * v_prev[i] + (1.0 - BETA2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        q = p - lr * upd
        if kind == "adamw" and (decay_mask is None or decay_mask[i]):
            q = q - lr * ADAMW_DECAY * p
        new_p.append(q)
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}
