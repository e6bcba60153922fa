"""Command-line entry points: train, eval, generate, diag, gen-data.

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments;
every key mirrors a CLI flag (hyphens and underscores are equivalent)
and explicit CLI flags win over file values.
"""
from __future__ import annotations

import argparse
import sys

from .cells import forget_saturation
from .checkpoint import load_checkpoint
from .curriculum import RSS_MODES
from .data import (STYLES, DatasetConfig, gen_batch, load_dataset,
                   save_dataset)
from .decoupling import caches_abs_cosine, strip_training_params
from .network import (FrameSequence, NetworkConfig, encoder_gradient_probe,
                      inference_mask, rollout)
from .rng import Rng
from .tensor import ContractError, NumericError, ShapeError
from .training import TrainConfig, evaluate, generate, train

_VARIANTS = {"convlstm": "convlstm_stack", "mflow": "mflow",
             "stlstm": "stlstm", "stlstm_action": "stlstm_action"}
_STRATEGIES = {"standard": "standard", "rss1": "rss_1", "rss2": "rss_2"}
_PROBES = ("gradients", "saturation", "cosine")


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ContractError(f"cannot parse {raw!r} as a boolean")


def _choice(table):
    def conv(raw: str):
        if raw not in table:
            raise ContractError(f"{raw!r} is not one of {sorted(table)}")
        return table[raw] if isinstance(table, dict) else raw
    return conv


def _read_config_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip() or not val.strip():
                raise ContractError(f"{path}:{lineno}: expected 'key = "
                                    f"value', got {line!r}")
            out[key.strip().replace("_", "-")] = val.strip()
    return out


class _Options:
    """CLI-over-file option resolution with unknown-key detection."""

    def __init__(self, args: argparse.Namespace, file_cfg: dict):
        self.args = vars(args)
        self.file = file_cfg
        self.used = set()

    def get(self, key: str, conv, default=None):
        self.used.add(key)
        cli = self.args.get(key.replace("-", "_"))
        if cli is not None:
            return cli
        if key in self.file:
            raw = self.file[key]
            try:
                return conv(raw)
            except (ContractError, ValueError) as e:
                raise ContractError(f"config key {key!r}: {e}") from e
        return default

    def reject_unknown(self) -> None:
        stray = sorted(set(self.file) - self.used)
        if stray:
            raise ContractError(f"unknown config keys: {', '.join(stray)}")


def _dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--canvas", type=int, help="frame edge length in pixels")
    p.add_argument("--sprite-size", type=int)
    p.add_argument("--num-sprites", type=int)
    p.add_argument("--speed-min", type=float)
    p.add_argument("--speed-max", type=float)
    p.add_argument("--style", choices=STYLES)
    p.add_argument("--length", type=int, help="frames per sequence")
    p.add_argument("--with-actions", action="store_const", const=True,
                   default=None)
    p.add_argument("--action-strength", type=float)


def _dataset_config(opt: _Options, canvas_default: int, length_default: int,
                    actions_default: bool) -> DatasetConfig:
    return DatasetConfig(
        num_sprites=opt.get("num-sprites", int, 2),
        canvas=opt.get("canvas", int, canvas_default),
        sprite_size=opt.get("sprite-size", int, 12),
        speed_min=opt.get("speed-min", float, 2.0),
        speed_max=opt.get("speed-max", float, 4.0),
        length=opt.get("length", int, length_default),
        style=opt.get("style", _choice(STYLES), "digit_glyph"),
        with_actions=opt.get("with-actions", _bool, actions_default),
        action_strength=opt.get("action-strength", float, 0.5))


# --- train ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    fc = _read_config_file(args.config) if args.config else {}
    opt = _Options(args, fc)
    variant = opt.get("variant", _choice(_VARIANTS), "stlstm")
    variant = _VARIANTS.get(variant, variant)
    strategy = opt.get("rss-strategy", _choice(_STRATEGIES), "rss_2")
    strategy = _STRATEGIES.get(strategy, strategy)
    T = opt.get("T", int, 10)
    K = opt.get("K", int, 10)
    canvas = opt.get("canvas", int, 64)
    net = NetworkConfig(
        variant=variant,
        num_layers=opt.get("layers", int, 4),
        channels=opt.get("channels", int, 128),
        kernel=opt.get("kernel", int, 5),
        patch=opt.get("patch", int, 4),
        frame_channels=1,
        height=canvas,
        width=canvas,
        action_dim=2 if variant == "stlstm_action" else 0)
    data_path = opt.get("data", str)
    dataset = None
    if data_path is None:
        dataset = _dataset_config(opt, canvas_default=canvas,
                                  length_default=T + K,
                                  actions_default=variant == "stlstm_action")
    clip = opt.get("clip", float, 1.0)
    cfg = TrainConfig(
        network=net, T=T, K=K,
        batch=opt.get("batch", int, 8),
        iters=opt.get("iters", int, 1000),
        lr=opt.get("lr", float, 1e-4),
        lambda_dec=opt.get("lambda-dec", float, 1.0),
        strategy=strategy,
        rss_mode=opt.get("rss-mode", _choice(RSS_MODES), "exponential"),
        eps_start=opt.get("eps-start", float),
        eps_end=opt.get("eps-end", float, 1.0),
        seed=opt.get("seed", int, 0),
        dataset=dataset, data_path=data_path,
        out_dir=opt.get("out", str),
        eval_interval=opt.get("eval-interval", int, 500),
        eval_size=opt.get("eval-size", int, 4),
        clip_norm=None if clip <= 0.0 else clip)
    resume = opt.get("resume", str)
    opt.reject_unknown()
    result = train(cfg, resume_from=resume)
    line = (f"trained iters={cfg.iters} variant={variant} "
            f"loss={result.log.loss[-1]:.6g}" if result.log.loss else
            f"trained iters={cfg.iters} variant={variant} (resumed past end)")
    if result.checkpoint_path:
        line += f" checkpoint={result.checkpoint_path}"
    print(line)
    if result.evals:
        k, report = result.evals[-1]
        stats = " ".join(f"{name}={val:.6g}"
                         for name, val in report.summary().items())
        print(f"eval@{k} {stats}")
    return 0


# --- eval ----------------------------------------------------------------------------


def _synthetic_eval_set(args: argparse.Namespace, net: NetworkConfig,
                        steps: int) -> FrameSequence:
    opt = _Options(args, {})
    dcfg = _dataset_config(opt, canvas_default=net.height,
                           length_default=steps,
                           actions_default=net.variant == "stlstm_action")
    return gen_batch(dcfg, Rng(args.seed), args.count)


def cmd_eval(args: argparse.Namespace) -> int:
    if (args.data is None) == (not args.synthetic):
        raise ContractError("choose exactly one of --data PATH or "
                            "--synthetic")
    ck = load_checkpoint(args.ckpt)
    if args.data is not None:
        seq = load_dataset(args.data)
    else:
        seq = _synthetic_eval_set(args, ck.model.cfg, args.T + args.K)
    thresholds = ()
    if args.csi_th:
        thresholds = tuple(float(x) for x in args.csi_th.split(","))
    report = evaluate(ck.model, seq, args.T, args.K, thresholds=thresholds,
                      csv_path=args.csv)
    stats = " ".join(f"{name}={val:.6g}"
                     for name, val in report.summary().items())
    print(f"eval sequences={seq.batch} horizon={report.horizon} {stats}")
    print(f"wrote {args.csv}")
    return 0


# --- generate ------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.ckpt)
    data = load_dataset(args.context)
    context = FrameSequence(frames=data.frames[:1], actions=None)
    paths = generate(ck.model, context, args.horizon, args.out,
                     prefix=args.prefix)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


# --- diag ----------------------------------------------------------------------------


def cmd_diag(args: argparse.Namespace) -> int:
    ck = load_checkpoint(args.ckpt)
    model, net = ck.model, ck.model.cfg
    T, K = args.T, args.K
    seq = _synthetic_eval_set(args, net, T + K)
    lines = []
    if args.probe == "gradients":
        lines.append("mode,t,value")
        last = encoder_gradient_probe(model, seq, T, K, mode="last_loss")
        for t, v in enumerate(last, start=1):
            lines.append(f"last_loss,{t},{v:.8g}")
        acc = encoder_gradient_probe(model, seq, T, K, mode="accumulated")
        for t, v in enumerate(acc, start=T + 1):
            lines.append(f"accumulated,{t},{v:.8g}")
    else:
        roll = rollout(strip_training_params(model), seq, T, K,
                       inference_mask(T, K), clamp=True)
        if args.probe == "saturation":
            lines.append("t,ratio_f,ratio_fprime")
            for t, caches in enumerate(roll.caches, start=1):
                r_f, r_fp = forget_saturation(caches)
                fp = f"{r_fp:.8g}" if r_fp is not None else "nan"
                lines.append(f"{t},{r_f:.8g},{fp}")
        else:
            lines.append("t,abs_cosine")
            for t, caches in enumerate(roll.caches, start=1):
                lines.append(f"{t},{caches_abs_cosine([caches]):.8g}")
    with open(args.csv, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {args.probe} probe ({len(lines) - 1} rows) to {args.csv}")
    return 0


# --- gen-data ------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    fc = _read_config_file(args.config) if args.config else {}
    opt = _Options(args, fc)
    dcfg = _dataset_config(opt, canvas_default=64, length_default=20,
                           actions_default=False)
    count = opt.get("count", int, 100)
    seed = opt.get("seed", int, 0)
    out = opt.get("out", str)
    opt.reject_unknown()
    if out is None:
        raise ContractError("--out PATH is required")
    if dcfg.with_actions:
        raise ContractError("dataset files store frames only; actions "
                            "cannot be saved (stream them during training)")
    seq = gen_batch(dcfg, Rng(seed), count)
    save_dataset(out, seq)
    n, steps, j, h, w = seq.frames.shape
    print(f"wrote {n} sequences of {steps} {h}x{w} frames to {out}")
    return 0


# --- parser --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stpredict",
        description="Recurrent video prediction: training, evaluation, "
                    "generation, diagnostics, and synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=sorted(_VARIANTS))
    p.add_argument("--layers", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--rss-mode", choices=RSS_MODES)
    p.add_argument("--rss-strategy", choices=sorted(_STRATEGIES))
    p.add_argument("--eps-start", type=float)
    p.add_argument("--eps-end", type=float)
    p.add_argument("--lambda-dec", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--lr", type=float)
    p.add_argument("--data", help="train from a fixed dataset file")
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--clip", type=float,
                   help="global grad-norm limit; 0 disables")
    p.add_argument("--resume", help="checkpoint to continue")
    _dataset_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset file to score on")
    p.add_argument("--synthetic", action="store_true",
                   help="score on freshly generated sequences")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--csi-th", help="comma-separated CSI thresholds")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    _dataset_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="forecast frames as images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", required=True,
                   help="dataset file; the first sequence is the context")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="frame")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("diag", help="model diagnostics as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--probe", choices=_PROBES, required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _dataset_flags(p)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    _dataset_flags(p)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ShapeError, NumericError, OSError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
