"""Gated recurrent cells for spatiotemporal prediction.

Three cell variants share a family resemblance but route memory differently:

- `convlstm_step`: the classic convolutional LSTM with Hadamard peephole
  terms on the input/forget gates (previous memory) and output gate (new
  memory). Memory C flows horizontally in time within a layer.
- `mflow_step`: a ConvLSTM rewired so its single memory M travels up the
  stack within a timestep and wraps from the top layer back to the bottom at
  the next timestep. Gates read the memory through convolutions rather than
  Hadamard products, and the input frame enters only at the bottom layer.
- `stlstm_step`: dual-memory cell. A temporal branch updates C from the
  layer's own previous state; a spatiotemporal branch updates M arriving
  from the layer below. The output gate reads both new memories and the
  hidden state is squeezed out of [C, M] by a 1x1 fusion convolution.

Gate convolutions over a shared input are evaluated through conv2d_multi
(one im2col, one stacked matmul); the per-gate weights remain separate
parameters. Biases are carried on exactly one slab per gate so each bias is
added once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .rng import Rng
from .tensor import (ContractError, ShapeError, Tensor, add, bmul,
                     channel_slice, concat_channels, conv2d, conv2d_multi,
                     hadamard, linear, lstm_update, parameter, sigmoid, tanh,
                     tile_spatial)


def uniform_conv_weight(rng: Rng, co: int, ci: int, k: int, name: str) -> Tensor:
    bound = math.sqrt(1.0 / (ci * k * k))
    return parameter(rng.uniform((co, ci, k, k), -bound, bound).astype(np.float32), name)


def zero_bias(c: int, name: str) -> Tensor:
    return parameter(np.zeros((c,), np.float32), name)


# --- plain ConvLSTM -----------------------------------------------------------

@dataclass
class ConvLstmParams:
    w_xg: Tensor
    w_xi: Tensor
    w_xf: Tensor
    w_xo: Tensor
    w_hg: Tensor
    w_hi: Tensor
    w_hf: Tensor
    w_ho: Tensor
    w_ci: Tensor  # [1,C,H,W] Hadamard peepholes
    w_cf: Tensor
    w_co: Tensor
    b_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_convlstm(rng: Rng, in_channels: int, channels: int, kernel: int,
                  height: int, width: int) -> ConvLstmParams:
    def xconv(name):
        return uniform_conv_weight(rng.split("init", name), channels, in_channels, kernel, name)

    def hconv(name):
        return uniform_conv_weight(rng.split("init", name), channels, channels, kernel, name)

    def peep(name):
        # Hadamard weights have unit fan-in per element
        return parameter(
            rng.split("init", name).uniform((1, channels, height, width), -1.0, 1.0)
            .astype(np.float32), name)

    return ConvLstmParams(
        w_xg=xconv("w_xg"), w_xi=xconv("w_xi"), w_xf=xconv("w_xf"), w_xo=xconv("w_xo"),
        w_hg=hconv("w_hg"), w_hi=hconv("w_hi"), w_hf=hconv("w_hf"), w_ho=hconv("w_ho"),
        w_ci=peep("w_ci"), w_cf=peep("w_cf"), w_co=peep("w_co"),
        b_g=zero_bias(channels, "b_g"), b_i=zero_bias(channels, "b_i"),
        b_f=zero_bias(channels, "b_f"), b_o=zero_bias(channels, "b_o"))


def _convlstm_step_cached(x: Tensor, h_prev: Tensor, c_prev: Tensor,
                          p: ConvLstmParams) -> tuple[Tensor, Tensor, "GateCache"]:
    c = c_prev.shape[1]
    zx = conv2d_multi(x, [p.w_xg, p.w_xi, p.w_xf, p.w_xo],
                      [p.b_g, p.b_i, p.b_f, p.b_o])
    zh = conv2d_multi(h_prev, [p.w_hg, p.w_hi, p.w_hf, p.w_ho])
    z = add(zx, zh)
    g = tanh(channel_slice(z, 0, c))
    i = sigmoid(add(channel_slice(z, c, 2 * c), bmul(p.w_ci, c_prev)))
    f = sigmoid(add(channel_slice(z, 2 * c, 3 * c), bmul(p.w_cf, c_prev)))
    c_new = lstm_update(f, c_prev, i, g)
    o = sigmoid(add(channel_slice(z, 3 * c, 4 * c), bmul(p.w_co, c_new)))
    h = hadamard(o, tanh(c_new))
    return h, c_new, GateCache(f=f)


def convlstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
                  p: ConvLstmParams) -> tuple[Tensor, Tensor]:
    h, c_new, _ = _convlstm_step_cached(x, h_prev, c_prev, p)
    return h, c_new


# --- memory-flow ConvLSTM ------------------------------------------------------

@dataclass
class MFlowParams:
    # input-to-state weights exist only for the bottom layer (None above it)
    w_xg: Tensor | None
    w_xi: Tensor | None
    w_xf: Tensor | None
    w_xo: Tensor | None
    w_hg: Tensor
    w_hi: Tensor
    w_hf: Tensor
    w_ho: Tensor
    w_ci: Tensor  # convolutional memory couplings, not Hadamard
    w_cf: Tensor
    w_co: Tensor
    b_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items() if v is not None}


def init_mflow(rng: Rng, in_channels: int | None, channels: int,
               kernel: int) -> MFlowParams:
    def conv(name, ci):
        return uniform_conv_weight(rng.split("init", name), channels, ci, kernel, name)

    has_x = in_channels is not None
    return MFlowParams(
        w_xg=conv("w_xg", in_channels) if has_x else None,
        w_xi=conv("w_xi", in_channels) if has_x else None,
        w_xf=conv("w_xf", in_channels) if has_x else None,
        w_xo=conv("w_xo", in_channels) if has_x else None,
        w_hg=conv("w_hg", channels), w_hi=conv("w_hi", channels),
        w_hf=conv("w_hf", channels), w_ho=conv("w_ho", channels),
        w_ci=conv("w_ci", channels), w_cf=conv("w_cf", channels),
        w_co=conv("w_co", channels),
        b_g=zero_bias(channels, "b_g"), b_i=zero_bias(channels, "b_i"),
        b_f=zero_bias(channels, "b_f"), b_o=zero_bias(channels, "b_o"))


def _mflow_step_cached(x_or_none: Tensor | None, h_below: Tensor, m_below: Tensor,
                       layer_index: int, p: MFlowParams
                       ) -> tuple[Tensor, Tensor, "GateCache"]:
    if layer_index == 1 and x_or_none is None:
        raise ContractError("mflow_step: bottom layer requires the input frame")
    if layer_index != 1 and x_or_none is not None:
        raise ContractError("mflow_step: input frame only enters at layer 1")
    c = m_below.shape[1]
    zh = conv2d_multi(h_below, [p.w_hg, p.w_hi, p.w_hf, p.w_ho],
                      [p.b_g, p.b_i, p.b_f, p.b_o])
    if x_or_none is not None:
        zx = conv2d_multi(x_or_none, [p.w_xg, p.w_xi, p.w_xf, p.w_xo])
        zh = add(zh, zx)
    zm = conv2d_multi(m_below, [p.w_ci, p.w_cf])
    g = tanh(channel_slice(zh, 0, c))
    i = sigmoid(add(channel_slice(zh, c, 2 * c), channel_slice(zm, 0, c)))
    f = sigmoid(add(channel_slice(zh, 2 * c, 3 * c), channel_slice(zm, c, 2 * c)))
    m = lstm_update(f, m_below, i, g)
    o = sigmoid(add(channel_slice(zh, 3 * c, 4 * c), conv2d(m, p.w_co)))
    h = hadamard(o, tanh(m))
    return h, m, GateCache(f=f)


def mflow_step(x_or_none: Tensor | None, h_below: Tensor, m_below: Tensor,
               layer_index: int, p: MFlowParams) -> tuple[Tensor, Tensor]:
    h, m, _ = _mflow_step_cached(x_or_none, h_below, m_below, layer_index, p)
    return h, m


# --- dual-memory cell -----------------------------------------------------------

@dataclass
class GateCache:
    """Per-step gate byproducts used by the decoupling loss and diagnostics."""
    dc_inc: Tensor | None = None   # i  * g   (temporal memory increment)
    dm_inc: Tensor | None = None   # i' * g'  (spatiotemporal memory increment)
    f: Tensor | None = None
    f_prime: Tensor | None = None


@dataclass
class StLstmParams:
    w_xg: Tensor
    w_xi: Tensor
    w_xf: Tensor
    w_hg: Tensor
    w_hi: Tensor
    w_hf: Tensor
    w_xg_p: Tensor  # primed: spatiotemporal branch input weights
    w_xi_p: Tensor
    w_xf_p: Tensor
    w_mg: Tensor
    w_mi: Tensor
    w_mf: Tensor
    w_xo: Tensor
    w_ho: Tensor
    w_co: Tensor
    w_mo: Tensor
    w_11: Tensor  # 1x1 fusion, 2*channels -> channels, no bias
    b_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_g_p: Tensor
    b_i_p: Tensor
    b_f_p: Tensor
    b_o: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_stlstm(rng: Rng, in_channels: int, channels: int, kernel: int) -> StLstmParams:
    def conv(name, ci, k=None):
        k = kernel if k is None else k
        return uniform_conv_weight(rng.split("init", name), channels, ci, k, name)

    return StLstmParams(
        w_xg=conv("w_xg", in_channels), w_xi=conv("w_xi", in_channels),
        w_xf=conv("w_xf", in_channels),
        w_hg=conv("w_hg", channels), w_hi=conv("w_hi", channels),
        w_hf=conv("w_hf", channels),
        w_xg_p=conv("w_xg_p", in_channels), w_xi_p=conv("w_xi_p", in_channels),
        w_xf_p=conv("w_xf_p", in_channels),
        w_mg=conv("w_mg", channels), w_mi=conv("w_mi", channels),
        w_mf=conv("w_mf", channels),
        w_xo=conv("w_xo", in_channels), w_ho=conv("w_ho", channels),
        w_co=conv("w_co", channels), w_mo=conv("w_mo", channels),
        w_11=conv("w_11", 2 * channels, k=1),
        b_g=zero_bias(channels, "b_g"), b_i=zero_bias(channels, "b_i"),
        b_f=zero_bias(channels, "b_f"),
        b_g_p=zero_bias(channels, "b_g_p"), b_i_p=zero_bias(channels, "b_i_p"),
        b_f_p=zero_bias(channels, "b_f_p"), b_o=zero_bias(channels, "b_o"))


def stlstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, m_below: Tensor,
                p: StLstmParams) -> tuple[Tensor, Tensor, Tensor, GateCache]:
    """One dual-memory step; returns new (h, c, m) plus the gate cache."""
    if h_prev.shape != c_prev.shape or h_prev.shape != m_below.shape:
        raise ShapeError(f"stlstm_step: state shapes differ: "
                         f"{h_prev.shape}/{c_prev.shape}/{m_below.shape}")
    c = c_prev.shape[1]
    zx = conv2d_multi(
        x,
        [p.w_xg, p.w_xi, p.w_xf, p.w_xg_p, p.w_xi_p, p.w_xf_p, p.w_xo],
        [p.b_g, p.b_i, p.b_f, p.b_g_p, p.b_i_p, p.b_f_p, p.b_o])
    zh = conv2d_multi(h_prev, [p.w_hg, p.w_hi, p.w_hf, p.w_ho])
    zm = conv2d_multi(m_below, [p.w_mg, p.w_mi, p.w_mf])

    g = tanh(add(channel_slice(zx, 0, c), channel_slice(zh, 0, c)))
    i = sigmoid(add(channel_slice(zx, c, 2 * c), channel_slice(zh, c, 2 * c)))
    f = sigmoid(add(channel_slice(zx, 2 * c, 3 * c), channel_slice(zh, 2 * c, 3 * c)))
    dc_inc = hadamard(i, g)
    c_new = add(hadamard(f, c_prev), dc_inc)

    g_p = tanh(add(channel_slice(zx, 3 * c, 4 * c), channel_slice(zm, 0, c)))
    i_p = sigmoid(add(channel_slice(zx, 4 * c, 5 * c), channel_slice(zm, c, 2 * c)))
    f_p = sigmoid(add(channel_slice(zx, 5 * c, 6 * c), channel_slice(zm, 2 * c, 3 * c)))
    dm_inc = hadamard(i_p, g_p)
    m_new = add(hadamard(f_p, m_below), dm_inc)

    # o reads C_t and M_t through convolutions; concatenating the states and
    # the two weights along channels computes W_co*C + W_mo*M in one pass,
    # and the same concatenated state feeds the 1x1 fusion
    cm = concat_channels(c_new, m_new)
    w_om = concat_channels(p.w_co, p.w_mo)
    o = sigmoid(add(add(channel_slice(zx, 6 * c, 7 * c),
                        channel_slice(zh, 3 * c, 4 * c)),
                    conv2d(cm, w_om)))
    h = hadamard(o, tanh(conv2d(cm, p.w_11)))
    cache = GateCache(dc_inc=dc_inc, dm_inc=dm_inc, f=f, f_prime=f_p)
    return h, c_new, m_new, cache


# --- action conditioning ----------------------------------------------------------

@dataclass
class ActionFuseParams:
    w_hv: Tensor
    w_av: Tensor
    w_embed: Tensor  # [channels, d_a]
    b_embed: Tensor  # [channels]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def init_action_fuse(rng: Rng, channels: int, action_dim: int,
                     kernel: int) -> ActionFuseParams:
    bound = math.sqrt(1.0 / action_dim)
    return ActionFuseParams(
        w_hv=uniform_conv_weight(rng.split("init", "w_hv"), channels, channels, kernel, "w_hv"),
        w_av=uniform_conv_weight(rng.split("init", "w_av"), channels, channels, kernel, "w_av"),
        w_embed=parameter(
            rng.split("init", "w_embed").uniform((channels, action_dim), -bound, bound)
            .astype(np.float32), "w_embed"),
        b_embed=zero_bias(channels, "b_embed"))


def action_fuse(h_prev: Tensor, action: Tensor, p: ActionFuseParams) -> Tensor:
    """Fuse the previous hidden state with an action vector into V.

    The action is embedded to `channels` values, tiled across the state's
    spatial grid, and gates the hidden-state pathway multiplicatively:
    V = (W_hv * h_prev) (x) (W_av * action_map). V substitutes for h_prev in
    the cell call, conditioning every gate on the commanded action.
    """
    if action.data.ndim != 2:
        raise ShapeError("action_fuse: action must be [N, d_a]")
    if action.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"action_fuse: batch {action.shape[0]} vs {h_prev.shape[0]}")
    if action.shape[1] != p.w_embed.shape[1]:
        raise ShapeError(f"action_fuse: action length {action.shape[1]}, "
                         f"expected {p.w_embed.shape[1]}")
    emb = linear(action, p.w_embed, p.b_embed)
    amap = tile_spatial(emb, h_prev.shape[2], h_prev.shape[3])
    return hadamard(conv2d(h_prev, p.w_hv), conv2d(amap, p.w_av))


# --- diagnostics -------------------------------------------------------------------

def forget_saturation(cache: GateCache | Iterable[GateCache],
                      threshold: float = 0.1) -> tuple[float, float | None]:
    """Fraction of forget-gate activations strictly below `threshold`.

    Returns per-family ratios (temporal f, spatiotemporal f'); the second is
    None for caches from single-memory cells.
    """
    caches: Sequence[GateCache] = [cache] if isinstance(cache, GateCache) else list(cache)
    if not caches:
        raise ContractError("forget_saturation: empty cache")

    def ratio(arrays: list[np.ndarray]) -> float | None:
        if not arrays:
            return None
        below = sum(int(np.count_nonzero(a < threshold)) for a in arrays)
        total = sum(a.size for a in arrays)
        return below / total

    r_f = ratio([c.f.data for c in caches if c.f is not None])
    r_fp = ratio([c.f_prime.data for c in caches if c.f_prime is not None])
    if r_f is None and r_fp is None:
        raise ContractError("forget_saturation: caches carry no forget gates")
    return (r_f if r_f is not None else 0.0), r_fp
