"""Label-fed upper-bound table: analytic bounds plus trained runs over seeds.

    python3 scripts/upper_bound_table.py --seeds 0 1 2 --out runs/upper_bound
"""
import argparse
import csv
import statistics
from pathlib import Path

from dupsample.cli import main as cli
from dupsample.data_metrics import SynthSpec, generate_dataset
from dupsample.label_codec import bilinear_upper_bound, codec_upper_bound, extract_patches, fit_pca

CONFIGS = [("dupsample", 32), ("bilinear", 32), ("bilinear", 16)]


def analytic(classes: int, seed: int, count: int) -> None:
    maps = generate_dataset(SynthSpec("blobs", 32, 32, classes, seed=seed), count)
    print(f"analytic bounds, blobs C={classes} seed={seed} ({count} maps)")
    print("r,code_dim,codec_miou,bilinear_miou")
    for r in (2, 4, 8, 16, 32):
        pm = extract_patches(maps, r, classes)
        k = min(64, pm.n)
        dup = codec_upper_bound(fit_pca(pm, k), maps).miou
        bil = bilinear_upper_bound(maps, r, classes).miou
        print(f"{r},{k},{dup:.4f},{bil:.4f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--out", type=Path, default=Path("runs/upper_bound"))
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args()

    analytic(8, 7, 64)
    if args.skip_training:
        return
    table = {}
    for head, os_ in CONFIGS:
        for seed in args.seeds:
            out = args.out / f"{head}_os{os_}_seed{seed}"
            code = cli(["upper-bound", "--head", head, "--output-stride", str(os_), "--seed", str(seed),
                        "--iters", str(args.iters), "--out", str(out)])
            if code != 0:
                raise SystemExit(code)
            with open(out / "result.csv") as fh:
                table.setdefault((head, os_), []).append(float(next(csv.DictReader(fh))["miou"]))
    print("\nhead,output_stride,median_heldout_miou,per_seed")
    for (head, os_), vals in table.items():
        print(f"{head},{os_},{statistics.median(vals):.4f},{' '.join(f'{v:.4f}' for v in vals)}")


if __name__ == "__main__":
    main()
