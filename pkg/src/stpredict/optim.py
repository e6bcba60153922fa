"""Adam with bias correction, plus the grad utilities the training loop uses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _named(params: Mapping[str, Tensor] | Sequence[Tensor]) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"p{i}", p) for i, p in enumerate(params)]


def zero_grads(params: Mapping[str, Tensor] | Sequence[Tensor]) -> None:
    for _, p in _named(params):
        p.zero_grad()


def clip_global_norm(params: Mapping[str, Tensor] | Sequence[Tensor],
                     max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm (useful telemetry either way).
    """
    items = _named(params)
    total = 0.0
    for name, p in items:
        if p.grad is None:
            raise ContractError(f"clip_global_norm: missing grad for {name!r}")
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for _, p in items:
            p.grad *= s
    return norm


def adam_step(params: Mapping[str, Tensor] | Sequence[Tensor],
              state: AdamState) -> None:
    """One update: m,v moment tracking, bias-corrected step, in-place."""
    items = _named(params)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ContractError("adam_step: parameter names must be unique")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in items:
        if p.grad is None:
            raise ContractError(f"adam_step: missing grad for {name!r}")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
