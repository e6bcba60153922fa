"""Decoupling of the two memory increments.

The dual-memory cell writes to C through i*g and to M through i'*g'. Left
alone, the two update directions tend to correlate and the memories learn
redundant features. The regularizer here projects both increments through
one shared 1x1 convolution and penalizes the absolute per-channel cosine
between the projections, pushing the updates toward orthogonality.

The projection weight exists only for this loss: it never enters the
prediction path, and strip_training_params removes it for inference.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .cells import GateCache
from .network import FrameSequence, Model, inference_mask, rollout
from .tensor import (ContractError, ShapeError, Tensor, _apply, add, conv2d)


def _per_channel_terms(a: np.ndarray, b: np.ndarray):
    """Per (sample, channel) spatial dot products: <a,b>, <a,a>, <b,b>."""
    n, c = a.shape[:2]
    fa = a.reshape(n, c, -1)
    fb = b.reshape(n, c, -1)
    s = np.einsum("ncs,ncs->nc", fa, fb)
    sq_a = np.einsum("ncs,ncs->nc", fa, fa)
    sq_b = np.einsum("ncs,ncs->nc", fb, fb)
    return s, sq_a, sq_b


def decouple_loss(dc: Tensor, dm: Tensor, eps: float = 1e-8) -> Tensor:
    """Sum over channels, mean over batch, of |cos(dc_c, dm_c)|.

    The norm product is evaluated as sqrt((a.a)(b.b)); with round-to-nearest
    square roots this makes parallel and anti-parallel channels land on
    exactly 1 whenever eps vanishes against the product.
    """
    if eps <= 0.0:
        raise ContractError("decouple_loss: eps must be positive")
    if dc.data.ndim != 4 or dm.data.ndim != 4:
        raise ShapeError("decouple_loss operands must be [N,C,H,W]")
    if dc.shape != dm.shape:
        raise ShapeError(f"decouple_loss: {dc.shape} vs {dm.shape}")
    a, b = dc.data, dm.data
    n = a.shape[0]
    s, sq_a, sq_b = _per_channel_terms(a, b)
    prod = np.sqrt(sq_a * sq_b)
    denom = prod + np.asarray(eps, dtype=a.dtype)
    v = np.abs(s) / denom
    out = np.array([v.sum() / n], dtype=a.dtype)

    def vjp(g: np.ndarray):
        g0 = g.reshape(-1)[0] / n
        sign = np.sign(s)
        safe = np.where(prod > 0, prod, 1.0)
        # d|cos|/da = sign(s) b / denom - |s| (b.b) a / (prod denom^2)
        t1 = (sign / denom)[:, :, None, None]
        ca = (np.abs(s) * sq_b / (safe * denom * denom))[:, :, None, None]
        cb = (np.abs(s) * sq_a / (safe * denom * denom))[:, :, None, None]
        ga = g0 * (t1 * b - ca * a)
        gb = g0 * (t1 * a - cb * b)
        return ga, gb

    return _apply(out, (dc, dm), vjp)


def project_increments(cache: GateCache, w_decouple: Tensor
                       ) -> tuple[Tensor, Tensor]:
    """Shared 1x1 projection of the C and M increments of one cell step."""
    if cache.dc_inc is None or cache.dm_inc is None:
        raise ContractError("cache carries no dual-memory increments")
    return (conv2d(cache.dc_inc, w_decouple),
            conv2d(cache.dm_inc, w_decouple))


def sequence_decouple_loss(caches: Sequence[Sequence[GateCache]],
                           w_decouple: Tensor, eps: float = 1e-8) -> Tensor:
    """Decoupling loss summed over every timestep and layer of a rollout."""
    total: Tensor | None = None
    for step_caches in caches:
        for cache in step_caches:
            dc, dm = project_increments(cache, w_decouple)
            term = decouple_loss(dc, dm, eps)
            total = term if total is None else add(total, term)
    if total is None:
        raise ContractError("sequence_decouple_loss: no caches")
    return total


def caches_abs_cosine(caches: Sequence[Sequence[GateCache]],
                      eps: float = 1e-12) -> float:
    """Mean |cos| between the raw (unprojected) increments over t, l, c, n."""
    vals = []
    for step_caches in caches:
        for cache in step_caches:
            if cache.dc_inc is None or cache.dm_inc is None:
                raise ContractError("cache carries no dual-memory increments")
            s, sq_a, sq_b = _per_channel_terms(cache.dc_inc.data,
                                               cache.dm_inc.data)
            vals.append(np.abs(s) / (np.sqrt(sq_a * sq_b) + eps))
    if not vals:
        raise ContractError("caches_abs_cosine: no caches")
    return float(np.mean(np.concatenate([v.ravel() for v in vals])))


def mean_abs_cosine(model: Model, seq: FrameSequence, T: int, K: int) -> float:
    """Redundancy diagnostic: run the inference protocol and average the
    per-channel |cos| between raw memory increments across the rollout."""
    result = rollout(model, seq, T, K, inference_mask(T, K))
    return caches_abs_cosine(result.caches)


def strip_training_params(model: Model) -> Model:
    """Inference copy without the decoupling projection (predictions are
    unchanged: the projection never feeds the forward path)."""
    return dataclasses.replace(model, w_decouple=None)
