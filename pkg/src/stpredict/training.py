"""Training loop, evaluation protocol, and frame generation.

Loss convention: the reconstruction term sums squared error over every
predicted position (supervision starts at the second frame, encode steps
included) and is averaged over the batch; the decoupling term is already
batch-averaged, so the total is recon/N + lambda * decouple.
"""
from __future__ import annotations

import dataclasses
import math
import os

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .curriculum import (STRATEGIES, RssSchedule, SsSchedule, draw_mask,
                         epsilon_at, eta_at, rss_for_budget, ss_for_budget,
                         strategy_eps_start)
from .data import DatasetConfig, gen_batch, load_dataset
from .decoupling import sequence_decouple_loss, strip_training_params
from .metrics import MetricReport, compute_report
from .network import (FrameSequence, Model, RolloutResult, inference_mask,
                      init_model, rollout)
from .optim import AdamState, adam_step, clip_global_norm, zero_grads
from .rng import Rng
from .tensor import (ContractError, NumericError, Tape, add, mse_sum,
                     scale)

DECOUPLED_VARIANTS = ("stlstm", "stlstm_action")


@dataclasses.dataclass
class TrainConfig:
    """Everything one training run needs; schedules derive from the
    iteration budget when not given explicitly."""
    network: object
    T: int = 10
    K: int = 10
    batch: int = 8
    iters: int = 1000
    lr: float = 1e-4
    lambda_dec: float = 1.0
    strategy: str = "rss_2"
    rss: RssSchedule | None = None
    ss: SsSchedule | None = None
    rss_mode: str = "exponential"
    eps_start: float | None = None
    eps_end: float = 1.0
    seed: int = 0
    dataset: DatasetConfig | None = None   # streaming synthesis
    data_path: str | None = None           # fixed dataset file
    out_dir: str | None = None
    eval_interval: int = 500
    eval_size: int = 4
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.T < 2 or self.K < 1:
            raise ContractError(f"need T >= 2 and K >= 1, got T={self.T}, "
                                f"K={self.K}")
        if self.batch < 1 or self.iters < 1:
            raise ContractError("batch and iters must be >= 1")
        if self.lr <= 0.0 or self.lambda_dec < 0.0:
            raise ContractError("lr must be positive, lambda_dec >= 0")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.eval_interval < 1 or self.eval_size < 1:
            raise ContractError("eval_interval and eval_size must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ContractError("clip_norm must be positive or None")
        if (self.dataset is None) == (self.data_path is None):
            raise ContractError("exactly one of dataset (streaming) or "
                                "data_path (fixed file) must be set")
        if self.eps_start is None:
            self.eps_start = (strategy_eps_start(self.strategy)
                              if self.strategy != "standard" else 1.0)
        if self.rss is None:
            self.rss = rss_for_budget(max(2, self.iters), self.rss_mode,
                                      eps_start=self.eps_start,
                                      eps_end=self.eps_end)
        if self.ss is None:
            self.ss = ss_for_budget(max(2, self.iters))
        net = self.network
        if self.dataset is not None:
            d = self.dataset
            if d.length < self.T + self.K:
                raise ContractError(f"dataset length {d.length} shorter than "
                                    f"T+K={self.T + self.K}")
            if (d.canvas, d.canvas) != (net.height, net.width):
                raise ContractError(f"dataset canvas {d.canvas} does not "
                                    f"match network {net.height}x{net.width}")
            if net.variant == "stlstm_action" and not d.with_actions:
                raise ContractError("action-conditioned training needs a "
                                    "dataset with with_actions=True")
        elif net.variant == "stlstm_action":
            raise ContractError("fixed dataset files carry no actions; "
                                "action-conditioned training must stream")


@dataclasses.dataclass
class TrainLog:
    """Per-iteration telemetry columns."""
    iterations: list = dataclasses.field(default_factory=list)
    loss: list = dataclasses.field(default_factory=list)
    recon: list = dataclasses.field(default_factory=list)
    decouple: list = dataclasses.field(default_factory=list)
    eps: list = dataclasses.field(default_factory=list)
    eta: list = dataclasses.field(default_factory=list)
    grad_norm: list = dataclasses.field(default_factory=list)

    def append(self, k, loss, recon, dec, eps, eta, gnorm):
        self.iterations.append(k)
        self.loss.append(loss)
        self.recon.append(recon)
        self.decouple.append(dec)
        self.eps.append(eps)
        self.eta.append(eta)
        self.grad_norm.append(gnorm)

    def to_csv(self):
        lines = ["k,loss,recon,decouple,eps,eta,grad_norm"]
        for i, k in enumerate(self.iterations):
            lines.append(f"{k},{self.loss[i]:.8g},{self.recon[i]:.8g},"
                         f"{self.decouple[i]:.8g},{self.eps[i]:.8g},"
                         f"{self.eta[i]:.8g},{self.grad_norm[i]:.8g}")
        return "\n".join(lines) + "\n"


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainLog
    evals: list            # (iteration, MetricReport) pairs
    checkpoint_path: str | None


def sequence_loss(model: Model, roll: RolloutResult, seq: FrameSequence,
                  lambda_dec: float):
    """Total training loss for one rollout.

    Returns (total, recon, dec) tensors; dec is None when the variant has
    no dual memories or lambda_dec is 0.
    """
    recon = None
    for i, pred in enumerate(roll.predictions):
        term = mse_sum(pred, seq.frame(i + 1))
        recon = term if recon is None else add(recon, term)
    recon = scale(recon, 1.0 / seq.batch)
    decoupled = (model.cfg.variant in DECOUPLED_VARIANTS
                 and lambda_dec > 0.0)
    if not decoupled:
        return recon, recon, None
    dec = scale(sequence_decouple_loss(roll.caches, model.w_decouple),
                lambda_dec)
    return add(recon, dec), recon, dec


def _trainable(model: Model, lambda_dec: float) -> dict:
    params = model.named_parameters()
    if not (model.cfg.variant in DECOUPLED_VARIANTS and lambda_dec > 0.0):
        params.pop("decouple.w", None)
    return params


def _draw_batch(cfg: TrainConfig, master: Rng, fixed: FrameSequence | None,
                k: int) -> FrameSequence:
    if fixed is None:
        return gen_batch(cfg.dataset, master.split("data", k), cfg.batch)
    idx = master.split("data", k).integers(0, fixed.batch, size=cfg.batch)
    return FrameSequence(frames=fixed.frames[idx], actions=None)


def _check_fixed(cfg: TrainConfig, fixed: FrameSequence) -> None:
    net = cfg.network
    n, steps, j, h, w = fixed.frames.shape
    if steps < cfg.T + cfg.K:
        raise ContractError(f"dataset steps {steps} shorter than "
                            f"T+K={cfg.T + cfg.K}")
    if (j, h, w) != (net.frame_channels, net.height, net.width):
        raise ContractError(f"dataset frames {(j, h, w)} do not match "
                            f"network {(net.frame_channels, net.height, net.width)}")


def train(cfg: TrainConfig, resume_from: str | None = None) -> TrainResult:
    """Run the gradient-descent loop; optionally continue a checkpoint.

    Resume keeps the schedule position and per-iteration data streams, so
    an interrupted run finishes with bit-identical parameters.
    """
    master = Rng(cfg.seed)
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.model.cfg != cfg.network:
            raise ContractError("checkpoint network config does not match "
                                "the training config")
        if ck.seed != cfg.seed:
            raise ContractError(f"checkpoint seed {ck.seed} != config seed "
                                f"{cfg.seed}; resuming would reorder data")
        if ck.iteration > cfg.iters:
            raise ContractError(f"checkpoint is at iteration {ck.iteration}, "
                                f"past the budget {cfg.iters}")
        model, adam, start = ck.model, ck.adam, ck.iteration
        adam.lr = cfg.lr
    else:
        model = init_model(cfg.network, master.split("init"))
        adam = AdamState(lr=cfg.lr)
        start = 0

    fixed = load_dataset(cfg.data_path) if cfg.data_path is not None else None
    if fixed is not None:
        _check_fixed(cfg, fixed)
        eval_seq = FrameSequence(
            frames=fixed.frames[:min(cfg.eval_size, fixed.batch)].copy(),
            actions=None)
    else:
        eval_seq = gen_batch(cfg.dataset, master.split("eval-data"),
                             cfg.eval_size)
    ssim_window = min(11, cfg.network.height, cfg.network.width)

    params = _trainable(model, cfg.lambda_dec)
    log = TrainLog()
    evals: list = []
    ckpt_path = None
    if cfg.out_dir is not None:
        os.makedirs(cfg.out_dir, exist_ok=True)
        ckpt_path = os.path.join(cfg.out_dir, "checkpoint.stpc")

    for k in range(start, cfg.iters):
        seq = _draw_batch(cfg, master, fixed, k)
        eps = epsilon_at(cfg.rss, k)
        eta = eta_at(cfg.ss, k)
        mask = draw_mask(eps, eta, cfg.T, cfg.K, cfg.strategy,
                         master.split("mask", k), n_seq=seq.batch)
        zero_grads(params)
        try:
            with Tape() as tape:
                roll = rollout(model, seq, cfg.T, cfg.K, mask)
                total, recon, dec = sequence_loss(model, roll, seq,
                                                  cfg.lambda_dec)
            recon_val = recon.item()
            dec_val = dec.item() if dec is not None else 0.0
            # logged total is the float64 sum of the parts, so the logged
            # decomposition is exact; the f32 tensor drives the gradients
            loss_val = recon_val + dec_val
            if not math.isfinite(loss_val):
                raise NumericError(f"loss={loss_val} recon={recon_val} "
                                   f"decouple={dec_val}")
            tape.backward(total)
        except NumericError as e:
            raise NumericError(f"training aborted at iteration {k}: "
                               f"{e}") from e
        limit = cfg.clip_norm if cfg.clip_norm is not None else math.inf
        gnorm = clip_global_norm(params, limit)
        adam_step(params, adam)
        log.append(k, loss_val, recon_val, dec_val, eps, eta, gnorm)

        done = k + 1
        if done % cfg.eval_interval == 0 or done == cfg.iters:
            report = evaluate(model, eval_seq, cfg.T, cfg.K,
                              ssim_window=ssim_window)
            evals.append((done, report))
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model, adam, done, cfg.seed)

    if cfg.out_dir is not None:
        with open(os.path.join(cfg.out_dir, "train_log.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(log.to_csv())
        if evals:
            with open(os.path.join(cfg.out_dir, "eval_final.csv"), "w",
                      encoding="utf-8") as fh:
                fh.write(evals[-1][1].to_csv())
        if start >= cfg.iters:
            # resumed past the budget: nothing ran, still leave a checkpoint
            save_checkpoint(ckpt_path, model, adam, cfg.iters, cfg.seed)
    final = Checkpoint(model=model, adam=adam, iteration=cfg.iters,
                       seed=cfg.seed)
    return TrainResult(checkpoint=final, log=log, evals=evals,
                       checkpoint_path=ckpt_path)


# --- evaluation ------------------------------------------------------------------


def forecast_frames(model: Model, seq: FrameSequence, T: int,
                    K: int) -> np.ndarray:
    """Strict inference protocol: true frames through T, own predictions
    after, clamped to [0,1]. Returns [N, K, J, H, W]."""
    roll = rollout(strip_training_params(model), seq, T, K,
                   inference_mask(T, K), clamp=True)
    return np.stack([p.data for p in roll.predictions[T - 1:]], axis=1)


def evaluate(model: Model, seq: FrameSequence, T: int, K: int,
             thresholds=(), csv_path: str | None = None,
             ssim_window: int = 11) -> MetricReport:
    """Per-forecast-timestep metric report under the inference protocol."""
    if seq.steps < T + K:
        raise ContractError(f"sequence length {seq.steps} shorter than "
                            f"T+K={T + K}")
    pred = forecast_frames(model, seq, T, K)
    truth = seq.frames[:, T:T + K]
    report = compute_report(pred, truth, thresholds=thresholds,
                            window=ssim_window)
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return report


def copy_last_frame(seq: FrameSequence, T: int, K: int) -> np.ndarray:
    """Trivial persistence predictor: repeat the last context frame."""
    if T < 1 or K < 1 or seq.steps < T + K:
        raise ContractError(f"cannot split length {seq.steps} into "
                            f"T={T}, K={K}")
    return np.repeat(seq.frames[:, T - 1:T], K, axis=1)


# --- image output -------------------------------------------------------------------


def _write_pnm(path: str, frame: np.ndarray) -> None:
    arr = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    c, h, w = arr.shape
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        payload = arr[0].tobytes()
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        payload = np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes()
    else:
        raise ContractError(f"cannot write {c}-channel frames as portable "
                            f"pixmaps (need 1 or 3)")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_pnm(path: str) -> np.ndarray:
    """Read a binary PGM/PPM back as float32 [C, H, W] in [0, 1]."""
    raw = open(path, "rb").read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte separates header from payload
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    if int(tokens[3]) != 255:
        raise ContractError("only 8-bit pixmaps are supported")
    if magic == b"P5":
        c = 1
    elif magic == b"P6":
        c = 3
    else:
        raise ContractError(f"not a binary pixmap: magic {magic!r}")
    payload = raw[pos:pos + c * h * w]
    if len(payload) != c * h * w:
        raise ContractError("pixmap payload truncated")
    arr = np.frombuffer(payload, np.uint8).reshape(h, w, c)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def generate(model: Model, context: FrameSequence, K: int, out_dir: str,
             actions: np.ndarray | None = None,
             prefix: str = "frame") -> list:
    """Forecast K frames past the given context and write them as images.

    Returns the list of written paths, one per forecast step, numbered by
    absolute sequence position.
    """
    if context.batch != 1:
        raise ContractError(f"generation takes a single sequence, got "
                            f"batch {context.batch}")
    if K < 1:
        raise ContractError(f"horizon must be >= 1, got {K}")
    T = context.steps
    pad = np.zeros((1, K) + context.frames.shape[2:], np.float32)
    frames = np.concatenate([context.frames, pad], axis=1)
    if actions is None:
        actions = context.actions
    if model.cfg.variant == "stlstm_action":
        if actions is None or actions.shape[1] < T + K - 1:
            raise ContractError(f"action-conditioned generation needs "
                                f"{T + K - 1} actions")
    seq = FrameSequence(frames=frames, actions=actions)
    pred = forecast_frames(model, seq, T, K)
    os.makedirs(out_dir, exist_ok=True)
    ext = "ppm" if context.frames.shape[2] == 3 else "pgm"
    paths = []
    for j in range(K):
        path = os.path.join(out_dir, f"{prefix}_{T + 1 + j:03d}.{ext}")
        _write_pnm(path, pred[0, j])
        paths.append(path)
    return paths
