"""Dense float tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: rank 1..4 arrays, float32 by default,
stride-1 same-padded convolutions, and exactly the elementwise ops the
recurrent cells need. No general broadcasting; the few batch-broadcast cases
(peepholes, row selection) have dedicated ops. Recording happens only inside
a `with Tape() as tape:` block, so inference runs allocation-light with no
graph bookkeeping.

conv2d lowers to im2col + one BLAS matmul. conv2d_multi evaluates several
convolutions over the same input in a single stacked matmul (one shared
im2col), which is the main throughput lever for gated cells; the weights stay
separate tensors.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An API precondition was violated (not a shape problem)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finiteness is required."""


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Globally toggle per-op NaN/Inf detection (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A rank 1..4 float array, optionally tracked by the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise ShapeError(f"rank must be 1..4, got {arr.ndim}")
        if arr.size == 0:
            raise ShapeError("zero-size tensors are not allowed")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# --- tape -------------------------------------------------------------------

_ACTIVE: "Tape | None" = None

# vjp: maps the output cotangent to one cotangent per input (None = no flow)
Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of one forward pass; single-writer.

    Entering the context makes this tape the recorder for every op executed
    in the block. `backward` accumulates into parameter `.grad` buffers
    (additively across calls); `gradients` is the pure variant used for
    intermediate-state probes and gradient checking.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Vjp]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE
        _ACTIVE = None

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
        self._nodes.append((out, inputs, vjp))
        self._produced.add(id(out))

    def _sweep(self, loss: Tensor) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
        if loss.size != 1:
            raise ContractError("backward requires a scalar loss")
        if id(loss) not in self._produced:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self._nodes):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            for inp, g in zip(inputs, vjp(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                acc = grads.get(key)
                # vjps may hand back shared buffers (e.g. add passes the
                # cotangent through), so merging never mutates in place
                grads[key] = g if acc is None else acc + g
                if key not in self._produced:
                    leaves[key] = inp
        return grads, leaves

    def backward(self, loss: Tensor) -> None:
        grads, leaves = self._sweep(loss)
        for key, leaf in leaves.items():
            g = grads[key]
            if leaf.grad is None:
                leaf.grad = g.astype(leaf.data.dtype, copy=True)
            else:
                leaf.grad = leaf.grad + g.astype(leaf.data.dtype, copy=False)

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Cotangents of `loss` w.r.t. `wrt` without touching `.grad`."""
        grads, _ = self._sweep(loss)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(loss: Tensor) -> None:
    if _ACTIVE is None:
        raise ContractError("backward() outside a tape: call tape.backward(loss)")
    _ACTIVE.backward(loss)


def _apply(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced")
    track = False
    if _ACTIVE is not None:
        for t in inputs:
            if t.requires_grad:
                track = True
                break
    out = Tensor(data, requires_grad=track)
    if track:
        _ACTIVE._record(out, inputs, vjp)
    return out


# --- elementwise ops --------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _apply(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _apply(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _apply(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def bmul(w: Tensor, x: Tensor) -> Tensor:
    """Multiply a [1,C,H,W] per-element weight onto a [N,C,H,W] batch."""
    if w.data.ndim != 4 or x.data.ndim != 4 or w.shape[0] != 1 or w.shape[1:] != x.shape[1:]:
        raise ShapeError(f"bmul: weight {w.shape} does not broadcast onto {x.shape}")
    wd, xd = w.data, x.data
    return _apply(wd * xd, (w, x),
                  lambda g: ((g * xd).sum(axis=0, keepdims=True), g * wd))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x.data))
    return _apply(y, (x,), lambda g: (g * (y * (1.0 - y)),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _apply(y, (x,), lambda g: (g * (1.0 - y * y),))


def clamp01(x: Tensor) -> Tensor:
    """Clamp to [0,1]; gradient passes only where the input lies inside."""
    xd = x.data
    y = np.clip(xd, 0.0, 1.0)
    return _apply(y, (x,), lambda g: (g * ((xd >= 0.0) & (xd <= 1.0)),))


def lstm_update(f: Tensor, c_prev: Tensor, i: Tensor, g: Tensor) -> Tensor:
    """Fused gated state update f*c_prev + i*g (one node instead of three)."""
    _same_shape(f, c_prev, "lstm_update")
    _same_shape(i, g, "lstm_update")
    _same_shape(f, i, "lstm_update")
    fd, cd, idd, gd = f.data, c_prev.data, i.data, g.data
    out = fd * cd + idd * gd
    return _apply(out, (f, c_prev, i, g),
                  lambda gr: (gr * cd, gr * fd, gr * gd, gr * idd))


def select_rows(keep: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Per-sample choice: row n of the output is a[n] where keep[n] else b[n]."""
    _same_shape(a, b, "select_rows")
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (a.shape[0],):
        raise ShapeError(f"select_rows: mask {keep.shape} vs batch {a.shape[0]}")
    sel = keep.reshape((-1,) + (1,) * (a.data.ndim - 1))
    out = np.where(sel, a.data, b.data)
    return _apply(out, (a, b),
                  lambda g: (np.where(sel, g, 0.0), np.where(sel, 0.0, g)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels requires rank-4 operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _apply(out, (a, b),
                  lambda g: (np.ascontiguousarray(g[:, :ca]),
                             np.ascontiguousarray(g[:, ca:])))


def channel_slice(x: Tensor, c0: int, c1: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("channel_slice requires a rank-4 tensor")
    if not 0 <= c0 < c1 <= x.shape[1]:
        raise ShapeError(f"channel_slice [{c0}:{c1}] out of range for {x.shape}")

    def vjp(g: np.ndarray):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, c0:c1] = g
        return (full,)

    return _apply(np.ascontiguousarray(x.data[:, c0:c1]), (x,), vjp)


def mse_sum(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of squared differences over every element (scalar output)."""
    _same_shape(pred, target, "mse_sum")
    diff = pred.data - target.data
    out = np.array([np.sum(diff * diff)], dtype=diff.dtype)

    def vjp(g: np.ndarray):
        d = (2.0 * g.reshape(-1)[0]) * diff
        return (d, -d)

    return _apply(out, (pred, target), vjp)


# --- spatial rearrangement ---------------------------------------------------

def _s2d(x: np.ndarray, p: int) -> np.ndarray:
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // p, p, w // p, p)
    return np.ascontiguousarray(y.transpose(0, 1, 3, 5, 2, 4)).reshape(
        n, c * p * p, h // p, w // p)


def _d2s(x: np.ndarray, p: int) -> np.ndarray:
    n, cpp, hs, ws = x.shape
    c = cpp // (p * p)
    y = x.reshape(n, c, p, p, hs, ws)
    return np.ascontiguousarray(y.transpose(0, 1, 4, 2, 5, 3)).reshape(
        n, c, hs * p, ws * p)


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """Fold each non-overlapping p x p block into channels (lossless)."""
    if x.data.ndim != 4:
        raise ShapeError("space_to_depth requires a rank-4 tensor")
    n, c, h, w = x.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide spatial dims {h}x{w}")
    return _apply(_s2d(x.data, p), (x,), lambda g: (_d2s(g, p),))


def depth_to_space(x: Tensor, p: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("depth_to_space requires a rank-4 tensor")
    if p < 1 or x.shape[1] % (p * p):
        raise ShapeError(f"channels {x.shape[1]} not divisible by {p}*{p}")
    return _apply(_d2s(x.data, p), (x,), lambda g: (_s2d(g, p),))


# --- dense / action ops -------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b) for rank-2 x [N,D] and w [C,D]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} vs w {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs out {w.shape[0]}")
        y = y + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g: np.ndarray):
        gx = g @ wd
        gw = g.T @ xd
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=0))

    return _apply(y, inputs, vjp)


def tile_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a [N,C] vector map to a constant [N,C,h,w] field."""
    if v.data.ndim != 2:
        raise ShapeError("tile_spatial requires a rank-2 tensor")
    out = np.ascontiguousarray(
        np.broadcast_to(v.data[:, :, None, None], v.shape + (h, w)))
    return _apply(out, (v,), lambda g: (g.sum(axis=(2, 3)),))


# --- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[N,C,H,W] -> [C*kh*kw, N*H*W] columns under same-padding."""
    n, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: [N,C,H,W,kh,kw] -> [C,kh,kw,N,H,W] -> flat columns in (n,h,w) order
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
        c * kh * kw, n * h * w)


def _col2im(cols: np.ndarray, n: int, c: int, h: int, w: int,
            kh: int, kw: int) -> np.ndarray:
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(
            cols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    ph, pw = kh // 2, kw // 2
    g6 = cols.reshape(c, kh, kw, n, h, w)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + h, j:j + w] += g6[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[:, :, ph:ph + h, pw:pw + w])


def _check_conv_operands(x: Tensor, weight: Tensor, bias: Tensor | None) -> None:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d requires rank-4 input and weight")
    co, ci, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
    if ci != x.shape[1]:
        raise ShapeError(f"conv2d: weight expects {ci} channels, input has {x.shape[1]}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {co} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, same-padded 2-D convolution; odd square kernels only."""
    _check_conv_operands(x, weight, bias)
    return conv2d_multi(x, [weight], [bias])


def conv2d_multi(x: Tensor, weights: Sequence[Tensor],
                 biases: Sequence[Tensor | None] | None = None) -> Tensor:
    """Several convolutions of one input, stacked along output channels.

    All weights must share kernel size. One im2col and one matmul serve the
    whole stack, which is how the gated cells keep per-step op counts low
    while the per-gate weights remain independent tensors.
    """
    if not weights:
        raise ContractError("conv2d_multi requires at least one weight")
    if biases is None:
        biases = [None] * len(weights)
    if len(biases) != len(weights):
        raise ShapeError("conv2d_multi: one bias slot per weight required")
    kh, kw = weights[0].shape[2], weights[0].shape[3]
    for wt, bt in zip(weights, biases):
        _check_conv_operands(x, wt, bt)
        if wt.shape[2:] != (kh, kw):
            raise ShapeError("conv2d_multi: mixed kernel sizes")

    n, ci, h, w = x.shape
    co_sizes = [wt.shape[0] for wt in weights]
    co_total = sum(co_sizes)
    cols = _im2col(x.data, kh, kw)
    w_mat = np.concatenate([wt.data.reshape(wt.shape[0], -1) for wt in weights])
    y = w_mat @ cols
    y = np.ascontiguousarray(y.reshape(co_total, n, h, w).transpose(1, 0, 2, 3))
    offset = 0
    for co, bt in zip(co_sizes, biases):
        if bt is not None:
            y[:, offset:offset + co] += bt.data.reshape(1, co, 1, 1)
        offset += co

    inputs: list[Tensor] = [x] + list(weights) + [bt for bt in biases if bt is not None]
    bias_flags = [bt is not None for bt in biases]

    def vjp(g: np.ndarray):
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co_total, -1)
        gx = _col2im(w_mat.T @ g_mat, n, ci, h, w, kh, kw) if x.requires_grad else None
        g_w_mat = g_mat @ cols.T
        grads: list[np.ndarray | None] = [gx]
        offset2 = 0
        for wt in weights:
            co = wt.shape[0]
            grads.append(g_w_mat[offset2:offset2 + co].reshape(wt.shape))
            offset2 += co
        offset2 = 0
        for co, has_bias in zip(co_sizes, bias_flags):
            if has_bias:
                grads.append(g[:, offset2:offset2 + co].sum(axis=(0, 2, 3)))
            offset2 += co
        return grads

    return _apply(y, tuple(inputs), vjp)


# --- diagnostics ---------------------------------------------------------------

def grad_check(f: Callable[[Sequence[Tensor]], Tensor],
               params: Sequence[Tensor], h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    Both routes are evaluated in float64 internally (params upcast in place
    and restored) because at h=1e-3 a float32 evaluation of f carries
    roundoff of the same order as the difference quotient. The relative
    error per element is |a-n| / max(|a|, |n|, 1e-8).
    """
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        with Tape() as tape:
            loss = f(params)
        if loss.size != 1:
            raise ContractError("grad_check requires a scalar-valued f")
        analytic = tape.gradients(loss, params)
        worst = 0.0
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = f(params).item()
                flat[idx] = orig - h
                fm = f(params).item()
                flat[idx] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(ana_flat[idx])
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                if rel > worst:
                    worst = rel
        return worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
