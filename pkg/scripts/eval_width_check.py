"""How wide a held-out batch does the schedule comparison need?

Retrains one seed of the rss_2-vs-standard pair (training is
bit-deterministic, so these are the same models the calibration runs
measured) and re-scores both on progressively larger held-out batches.
If the sign of the MSE gap moves with batch size, the comparison at the
small default width is estimator-noise-limited rather than a property
of the trained models.
"""

import argparse
import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from stpredict.data import DatasetConfig, gen_batch
from stpredict.decoupling import strip_training_params
from stpredict.network import NetworkConfig, encoder_gradient_probe
from stpredict.rng import Rng
from stpredict.training import TrainConfig, evaluate, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=2)
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--channels", type=int, default=12)
    ap.add_argument("--widths", type=str, default="16,64,128,256")
    ap.add_argument("--eval-seed", type=int, default=9000)
    args = ap.parse_args(argv)

    net = NetworkConfig(variant="stlstm", num_layers=2,
                        channels=args.channels, kernel=3, patch=4,
                        frame_channels=1, height=32, width=32)
    data = DatasetConfig(num_sprites=2, canvas=32, sprite_size=8,
                         speed_min=0.3, speed_max=0.7, length=20)

    models = {}
    for strategy in ("rss_2", "standard"):
        cfg = TrainConfig(network=net, T=10, K=10, batch=8,
                          iters=args.iters, lr=1e-3, lambda_dec=1.0,
                          strategy=strategy, seed=args.seed, dataset=data,
                          eval_interval=10 ** 9)
        models[strategy] = strip_training_params(train(cfg).checkpoint.model)
        print(f"trained {strategy} seed={args.seed}", flush=True)

    # sequence i only depends on rng.split("seq", i), so width-N batches
    # nest: the first 16 of any draw equal the calibration held-out batch
    widths = [int(w) for w in args.widths.split(",")]
    for n in widths:
        sub = gen_batch(data, Rng(args.eval_seed), n)
        r = evaluate(models["rss_2"], sub, 10, 10)
        s = evaluate(models["standard"], sub, 10, 10)
        gap = r.mean_mse - s.mean_mse
        pr = float(encoder_gradient_probe(models["rss_2"], sub,
                                          10, 10, mode="accumulated").sum())
        ps = float(encoder_gradient_probe(models["standard"], sub,
                                          10, 10, mode="accumulated").sum())
        print(f"N={n:4d}  rss {r.mean_mse:.6f}  std {s.mean_mse:.6f}  "
              f"gap {gap:+.6f} ({'rss' if gap <= 0 else 'std'} better)  "
              f"probe rss {pr:.3f} std {ps:.3f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
