"""Functional optimizers over named parameter collections.

Both steps are pure: they take parameters and gradients keyed by name and
return fresh tensors, leaving their inputs untouched.  ``sgd_step`` is built
from taped ops so an update can itself be differentiated (the inner loop of
the meta-learners relies on this); Adam drives the outer loop only and works
on raw arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor, mul, sub


def _check_aligned(params: Mapping[str, Tensor], grads: Mapping[str, Tensor]):
    missing = sorted(set(params) - set(grads))
    extra = sorted(set(grads) - set(params))
    if missing or extra:
        raise KeyError(f"parameter/gradient names differ: missing {missing}, extra {extra}")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(
                f"gradient shape {grads[name].shape} does not match "
                f"parameter {name!r} of shape {params[name].shape}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float) -> dict:
    """One step of plain gradient descent: p - lr * g, name by name.

    Built from taped ops: if the gradients are on a tape, so is the result,
    which is what lets outer gradients flow through inner updates.
    """
    _check_aligned(params, grads)
    return {name: sub(params[name], mul(grads[name], lr)) for name in params}


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initialize(cls, params: Mapping[str, Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        m = {n: np.zeros_like(t.data) for n, t in params.items()}
        v = {n: np.zeros_like(t.data) for n, t in params.items()}
        return cls(m=m, v=v, t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: Mapping[str, Tensor],
              grads: Mapping[str, Tensor], lr: float) -> tuple:
    """One Adam step with bias correction; returns (new_state, new_params)."""
    _check_aligned(params, grads)
    if set(state.m) != set(params):
        raise KeyError("optimizer state was initialized for different parameters")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    for name in params:
        g = grads[name].data
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_m[name] = m
        new_v[name] = v
        new_p[name] = Tensor(params[name].data - lr * m_hat / (np.sqrt(v_hat) + eps))
    new_state = AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=eps)
    return new_state, new_p
