"""Adaptive moment estimation over flat parameter dicts."""

from __future__ import annotations

import numpy as np

from .unet import is_learnable


class NonFiniteGradients(FloatingPointError):
    """A gradient carried inf/nan into the optimizer."""


def adam_init(params: dict) -> dict:
    """Zeroed first/second moments for every learnable entry."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items() if is_learnable(k)},
        "v": {k: np.zeros_like(v) for k, v in params.items() if is_learnable(k)},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected update; returns fresh (params, state) dicts.

    Keys without a gradient (batch-norm running stats) pass through by
    reference, so state updated by a train-mode forward is preserved.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradients(f"non-finite gradient for {k}")
    t = state["step"] + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params = dict(params)
    new_m = dict(state["m"])
    new_v = dict(state["v"])
    for k, g in grads.items():
        g = g.astype(params[k].dtype, copy=False)
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[k] = params[k] - update.astype(params[k].dtype, copy=False)
        new_m[k] = m
        new_v[k] = v
    return new_params, {"step": t, "m": new_m, "v": new_v}
