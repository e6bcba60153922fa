"""Stacked recurrent networks for frame prediction.

A model is L gated cells, an output head, and the routing between them.
Four variants share the skeleton and differ in how memory moves:

- convlstm_stack: each layer keeps its own temporal memory C; no state
  crosses layers except the hidden output feeding upward.
- mflow: one memory M zigzags up through the layers within a timestep and
  wraps from the top layer back to layer 1 at the next timestep. The bottom
  layer also receives the top layer's previous hidden state.
- stlstm: dual memories. Per-layer C steps horizontally in time, shared M
  zigzags like mflow. Both feed the output gate and the fused hidden state.
- stlstm_action: stlstm where the previous hidden state entering every cell
  is first gated by an embedded action map.

Frames are patchified (space-to-depth) before entering layer 1, so the
recurrence runs at H/p x W/p; the head is a 1x1 convolution from the top
hidden state back to p*p*J channels, unpatchified to a full frame. The head
is linear; predictions are clamped to [0,1] only when `clamp` is requested
(evaluation), keeping training gradients unaffected.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cells import (ActionFuseParams, ConvLstmParams, GateCache, MFlowParams,
                    StLstmParams, _convlstm_step_cached, _mflow_step_cached,
                    action_fuse, init_action_fuse, init_convlstm, init_mflow,
                    init_stlstm, stlstm_step, uniform_conv_weight, zero_bias)
from .rng import Rng
from .tensor import (ContractError, ShapeError, Tape, Tensor, clamp01, conv2d,
                     depth_to_space, mse_sum, select_rows, space_to_depth,
                     zeros)

VARIANTS = ("convlstm_stack", "mflow", "stlstm", "stlstm_action")


@dataclass
class NetworkConfig:
    variant: str
    num_layers: int = 4
    channels: int = 128
    kernel: int = 5
    patch: int = 4
    frame_channels: int = 1
    height: int = 64
    width: int = 64
    action_dim: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; "
                                f"expected one of {VARIANTS}")
        if self.num_layers < 1:
            raise ContractError("num_layers must be >= 1")
        if self.channels < 1 or self.frame_channels < 1:
            raise ContractError("channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError(f"kernel must be odd, got {self.kernel}")
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ContractError(f"patch {self.patch} must divide "
                                f"{self.height}x{self.width}")
        if self.variant == "stlstm_action":
            if self.action_dim < 1:
                raise ContractError("stlstm_action requires action_dim >= 1")
        elif self.action_dim:
            raise ContractError("action_dim is only meaningful for stlstm_action")

    @property
    def grid_height(self) -> int:
        return self.height // self.patch

    @property
    def grid_width(self) -> int:
        return self.width // self.patch

    @property
    def patched_channels(self) -> int:
        return self.frame_channels * self.patch * self.patch


@dataclass
class NetworkState:
    """Recurrent state between timesteps; entries are [N, channels, H/p, W/p]."""
    h: list
    c: list | None  # absent for mflow
    m: Tensor | None  # absent for convlstm_stack


@dataclass
class FrameSequence:
    """A batch of frame sequences [N, steps, J, H, W] with values in [0,1].

    `actions` (action-conditioned tasks only) holds one vector per input
    position: actions[:, t] is the command applied while frame t is on
    screen, i.e. the cause of the transition to frame t+1.
    """
    frames: np.ndarray
    actions: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 5:
            raise ShapeError(f"frames must be [N,steps,J,H,W], got "
                             f"{self.frames.shape}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ContractError(f"frame values outside [0,1]: [{lo}, {hi}]")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float32)
            if (self.actions.ndim != 3
                    or self.actions.shape[0] != self.frames.shape[0]
                    or self.actions.shape[1] < self.frames.shape[1] - 1):
                raise ShapeError(f"actions must be [N,>=steps-1,d_a], got "
                                 f"{self.actions.shape}")

    @property
    def batch(self) -> int:
        return self.frames.shape[0]

    @property
    def steps(self) -> int:
        return self.frames.shape[1]

    def frame(self, t: int) -> Tensor:
        return Tensor(np.ascontiguousarray(self.frames[:, t]))

    def action(self, t: int) -> Tensor:
        if self.actions is None:
            raise ContractError("sequence carries no actions")
        return Tensor(np.ascontiguousarray(self.actions[:, t]))


@dataclass
class Model:
    cfg: NetworkConfig
    layers: list
    head_w: Tensor
    head_b: Tensor
    action: list | None = None
    w_decouple: Tensor | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, lp in enumerate(self.layers):
            out.update(lp.named(f"layers.{i}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        if self.action is not None:
            for i, ap in enumerate(self.action):
                out.update(ap.named(f"action.{i}"))
        if self.w_decouple is not None:
            out["decouple.w"] = self.w_decouple
        return out


def init_model(cfg: NetworkConfig, rng: Rng) -> Model:
    in_ch = cfg.patched_channels
    layers = []
    for l in range(cfg.num_layers):
        lr = rng.split("layer", l)
        ci = in_ch if l == 0 else cfg.channels
        if cfg.variant == "convlstm_stack":
            layers.append(init_convlstm(lr, ci, cfg.channels, cfg.kernel,
                                        cfg.grid_height, cfg.grid_width))
        elif cfg.variant == "mflow":
            layers.append(init_mflow(lr, in_ch if l == 0 else None,
                                     cfg.channels, cfg.kernel))
        else:
            layers.append(init_stlstm(lr, ci, cfg.channels, cfg.kernel))

    head_ch = cfg.patch * cfg.patch * cfg.frame_channels
    head_w = uniform_conv_weight(rng.split("head"), head_ch, cfg.channels,
                                 1, "head_w")
    head_b = zero_bias(head_ch, "head_b")

    action = None
    if cfg.variant == "stlstm_action":
        action = [init_action_fuse(rng.split("action", l), cfg.channels,
                                   cfg.action_dim, cfg.kernel)
                  for l in range(cfg.num_layers)]

    w_dec = None
    if cfg.variant in ("stlstm", "stlstm_action"):
        w_dec = uniform_conv_weight(rng.split("decouple"), cfg.channels,
                                    cfg.channels, 1, "w_decouple")
    return Model(cfg=cfg, layers=layers, head_w=head_w, head_b=head_b,
                 action=action, w_decouple=w_dec)


def patchify(frame: Tensor, p: int) -> Tensor:
    return space_to_depth(frame, p)


def unpatchify(x: Tensor, p: int) -> Tensor:
    return depth_to_space(x, p)


def init_state(model: Model, n: int) -> NetworkState:
    cfg = model.cfg
    shape = (n, cfg.channels, cfg.grid_height, cfg.grid_width)
    h = [zeros(shape) for _ in range(cfg.num_layers)]
    c = None
    if cfg.variant != "mflow":
        c = [zeros(shape) for _ in range(cfg.num_layers)]
    m = None
    if cfg.variant != "convlstm_stack":
        m = zeros(shape)
    return NetworkState(h=h, c=c, m=m)


def _check_state(cfg: NetworkConfig, state: NetworkState, n: int) -> None:
    want = (n, cfg.channels, cfg.grid_height, cfg.grid_width)
    if len(state.h) != cfg.num_layers or state.h[0].shape != want:
        raise ShapeError(f"state mismatch: {len(state.h)} layers of "
                         f"{state.h[0].shape}, expected {cfg.num_layers} "
                         f"of {want}")


def step(model: Model, frame: Tensor, state: NetworkState,
         action: Tensor | None = None
         ) -> tuple[NetworkState, Tensor, list]:
    """Advance one timestep; returns (next_state, x_hat, per-layer caches)."""
    cfg = model.cfg
    if action is not None and cfg.variant != "stlstm_action":
        raise ContractError("action supplied to a non-action variant")
    if action is None and cfg.variant == "stlstm_action":
        raise ContractError("stlstm_action requires an action every step")
    if frame.shape[1:] != (cfg.frame_channels, cfg.height, cfg.width):
        raise ShapeError(f"frame {frame.shape} does not match config "
                         f"[N,{cfg.frame_channels},{cfg.height},{cfg.width}]")
    _check_state(cfg, state, frame.shape[0])

    x = patchify(frame, cfg.patch)
    hs: list[Tensor] = []
    caches: list[GateCache] = []
    if cfg.variant == "convlstm_stack":
        cs = []
        inp = x
        for l, p in enumerate(model.layers):
            h, c, cache = _convlstm_step_cached(inp, state.h[l], state.c[l], p)
            hs.append(h)
            cs.append(c)
            caches.append(cache)
            inp = h
        new_state = NetworkState(h=hs, c=cs, m=None)
    elif cfg.variant == "mflow":
        # the bottom layer reads the top layer's previous hidden state and
        # memory; above it, both arrive from the layer below at this timestep
        h_below, m = state.h[-1], state.m
        for l, p in enumerate(model.layers):
            h_below, m, cache = _mflow_step_cached(
                x if l == 0 else None, h_below, m, l + 1, p)
            hs.append(h_below)
            caches.append(cache)
        new_state = NetworkState(h=hs, c=None, m=m)
    else:
        cs = []
        m = state.m
        inp = x
        for l, p in enumerate(model.layers):
            h_prev = state.h[l]
            if action is not None:
                h_prev = action_fuse(h_prev, action, model.action[l])
            h, c, m, cache = stlstm_step(inp, h_prev, state.c[l], m, p)
            hs.append(h)
            cs.append(c)
            caches.append(cache)
            inp = h
        new_state = NetworkState(h=hs, c=cs, m=m)

    x_hat = unpatchify(conv2d(hs[-1], model.head_w, model.head_b), cfg.patch)
    return new_state, x_hat, caches


@dataclass
class RolloutResult:
    """predictions[i] is x_hat for sequence position i+1 (targets frames[:, i+1]).

    caches[i] holds the per-layer gate caches of the step that produced
    predictions[i]; h_first[i] is that step's layer-1 hidden state.
    """
    predictions: list
    caches: list
    h_first: list


def _mask_values(mask, n: int, n_steps: int) -> np.ndarray:
    vals = np.asarray(getattr(mask, "values", mask), dtype=bool)
    if vals.ndim == 1:
        vals = np.broadcast_to(vals, (n, vals.shape[0]))
    if vals.shape != (n, n_steps):
        raise ShapeError(f"mask shape {vals.shape}, expected ({n}, {n_steps})")
    if not np.all(vals[:, 0]):
        raise ContractError("mask position 1 must feed the true frame")
    return vals


def rollout(model: Model, seq: FrameSequence, T: int, K: int, mask,
            clamp: bool = False) -> RolloutResult:
    """Unroll T+K-1 steps; at position t the input is the true frame where
    mask[t] is set, the previous prediction otherwise."""
    if T < 1 or K < 1:
        raise ContractError(f"T={T}, K={K} must be >= 1")
    n_steps = T + K - 1
    if seq.steps < T + K:
        raise ContractError(f"sequence length {seq.steps} shorter than "
                            f"T+K={T + K}")
    n = seq.batch
    mvals = _mask_values(mask, n, n_steps)
    uses_actions = model.cfg.variant == "stlstm_action"
    if uses_actions:
        if seq.actions is None:
            raise ContractError("stlstm_action rollout requires actions")
        if seq.actions.shape[1] < n_steps:
            raise ContractError(f"need {n_steps} actions, got "
                                f"{seq.actions.shape[1]}")

    state = init_state(model, n)
    preds: list[Tensor] = []
    caches: list[list[GateCache]] = []
    h_first: list[Tensor] = []
    prev: Tensor | None = None
    for t in range(n_steps):
        if t == 0:
            inp = seq.frame(0)
        else:
            col = mvals[:, t]
            if col.all():
                inp = seq.frame(t)
            elif not col.any():
                inp = prev
            else:
                inp = select_rows(col, seq.frame(t), prev)
        act = seq.action(t) if uses_actions else None
        state, x_hat, step_caches = step(model, inp, state, act)
        if clamp:
            x_hat = clamp01(x_hat)
        preds.append(x_hat)
        caches.append(step_caches)
        h_first.append(state.h[0])
        prev = x_hat
    return RolloutResult(predictions=preds, caches=caches, h_first=h_first)


def inference_mask(T: int, K: int) -> np.ndarray:
    """True frames through position T, own predictions after."""
    mask = np.zeros(T + K - 1, dtype=bool)
    mask[:T] = True
    return mask


def encoder_gradient_probe(model: Model, seq: FrameSequence, T: int, K: int,
                           mode: str = "last_loss") -> np.ndarray:
    """Norms of loss gradients w.r.t. the layer-1 hidden history.

    last_loss: ||d L_{T+K} / d H_t^1|| for t = 1..T+K-1.
    accumulated: mean over encode positions tau = 2..T of
    ||d L_t / d H_tau^1||, one value per forecast t = T+1..T+K.
    Both are normalized by their maximum.
    """
    if T + K < 2:
        raise ContractError("probe needs T+K >= 2")
    if mode not in ("last_loss", "accumulated"):
        raise ContractError(f"unknown probe mode {mode!r}")
    if mode == "accumulated" and T < 2:
        raise ContractError("accumulated probe needs T >= 2")

    with Tape() as tape:
        result = rollout(model, seq, T, K, inference_mask(T, K))
        if mode == "last_loss":
            loss = mse_sum(result.predictions[T + K - 2], seq.frame(T + K - 1))
            grads = tape.gradients(loss, result.h_first)
            vals = np.array([np.linalg.norm(g.astype(np.float64))
                             for g in grads])
        else:
            vals = np.empty(K)
            encode_h = result.h_first[1:T]  # H_tau^1 for tau = 2..T
            for j, t in enumerate(range(T + 1, T + K + 1)):
                loss = mse_sum(result.predictions[t - 2], seq.frame(t - 1))
                grads = tape.gradients(loss, encode_h)
                vals[j] = np.mean([np.linalg.norm(g.astype(np.float64))
                                   for g in grads])
    peak = vals.max()
    if peak > 0:
        vals = vals / peak
    return vals
