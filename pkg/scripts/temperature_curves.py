"""Training-loss curves for learnable versus frozen softmax temperature.

Writes one CSV per (seed, mode) plus a summary of iterations to a loss threshold.

    python3 scripts/temperature_curves.py --seeds 0 1 2 --out runs/temperature
"""
import argparse
import statistics
from pathlib import Path

from dupsample.data_metrics import SynthSpec, generate_dataset
from dupsample.label_codec import extract_patches, fit_pca
from dupsample.toy_model import FusionSpec, Head, init_model
from dupsample.trainer import TrainConfig, gt_fed_dataset, train


def run(seed: int, learnable: bool, args):
    maps = generate_dataset(SynthSpec("blobs", 32, 32, args.classes, seed=seed), args.count)
    codec = fit_pca(extract_patches(maps, 32, args.classes), 64)
    model = init_model(args.classes, codec.code_dim, seed=seed)
    head = Head("dupsample", codec, learn_temperature=learnable)
    cfg = TrainConfig(base_lr=args.lr, total_iters=args.iters, seed=seed, log_every=args.log_every)
    return train(model, FusionSpec(), head, gt_fed_dataset(maps, args.classes), cfg)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--count", type=int, default=64)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--log-every", type=int, default=10)
    ap.add_argument("--threshold", type=float, default=0.1)
    ap.add_argument("--out", type=Path, default=Path("runs/temperature"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    hits = {"learnable": [], "frozen": []}
    for seed in args.seeds:
        for mode in hits:
            log = run(seed, mode == "learnable", args)
            (args.out / f"{mode}_seed{seed}.csv").write_text(log.to_csv())
            it = log.first_iter_below(args.threshold)
            hits[mode].append(float("inf") if it is None else it)
            print(f"seed {seed} {mode:9s} final_loss={log.final['final_loss']:.4f} T={log.final['T']:.4f} "
                  f"first_below_{args.threshold}={it}")
    for mode, vals in hits.items():
        print(f"{mode}: median iterations to {args.threshold} = {statistics.median(vals)}")


if __name__ == "__main__":
    main()
