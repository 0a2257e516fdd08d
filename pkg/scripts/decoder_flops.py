"""Decoder multiply-adds for both fusion schemes across tap layers and input sizes.

Shape arithmetic only; add --train to also run compare-decoders per tap.

    python3 scripts/decoder_flops.py --sizes 64 512
"""
import argparse
from pathlib import Path

from dupsample.cli import main as cli
from dupsample.toy_model import FusionSpec, Head, count_flops, init_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 512])
    ap.add_argument("--hidden", type=int, nargs="*", default=[64])
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--train", action="store_true")
    ap.add_argument("--out", type=Path, default=Path("runs/decoders"))
    args = ap.parse_args()

    print("input,tap_layer,tap_ratio,vanilla_madds,proposed_madds,ratio")
    for size in args.sizes:
        for tap in range(4):
            totals = {}
            for scheme in ("vanilla", "proposed"):
                spec = FusionSpec(scheme, tap)
                model = init_model(4, 4, spec, decoder_hidden=tuple(args.hidden), decoder_kernel=args.kernel)
                totals[scheme] = count_flops(model, spec, Head("bilinear"), size, size).total
            print(f"{size},{tap},{model.ratios[tap]},{totals['vanilla']},{totals['proposed']},"
                  f"{totals['vanilla'] / totals['proposed']:.2f}")
    if args.train:
        hidden = ",".join(map(str, args.hidden))
        for tap in range(4):
            code = cli(["compare-decoders", "--tap-layer", str(tap), "--decoder-hidden", hidden,
                        "--decoder-kernel", str(args.kernel), "--out", str(args.out / f"tap{tap}")])
            if code != 0:
                raise SystemExit(code)
            print((args.out / f"tap{tap}" / "compare.csv").read_text())


if __name__ == "__main__":
    main()
