"""Command-line entry point: ``dupsample {fit-codec,upper-bound,compare-decoders,grad-check}``.

Every command writes its primary outputs plus ``manifest.json`` into ``--out``.
Options may also come from an INI file given with ``--config``; each section
is named after a command and its keys are option names. Flags win.

Exit codes: 0 success, 1 check failure (or training divergence), 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data_metrics import LabelFormatError, SynthSpec, generate_dataset, read_labelmap
from .dupsampling_ops import loss_bilinear, loss_dupsample, loss_regression, softmax_t_ce_backward
from .label_codec import (
    DEFAULT_CODE_DIM,
    LabelCodec,
    codec_to_bytes,
    codec_upper_bound,
    extract_patches,
    fit_pca,
    fit_sgd,
    reconstruction_error,
)
from .tensor_kernels import ConvKernel, ShapeError, bilinear_resize, bilinear_resize_backward, conv2d_backward, conv2d_forward
from .toy_model import FusionSpec, Head, count_flops, encoder_strides, init_model, model_forward_loss
from .trainer import DivergenceError, TrainConfig, _flat_grads, _params, _set_params, evaluate, grad_check, gt_fed_dataset, train


class UsageError(Exception):
    pass


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _csv_list(text: str) -> list[str]:
    return [t for t in text.replace(",", " ").split() if t]


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in _csv_list(text))


# ---------------------------------------------------------------- parser


def _add_data(p, classes=4, count=64, eval_count=16):
    g = p.add_argument_group("synthetic dataset")
    g.add_argument("--kind", choices=["stripes", "checker", "blobs"], default="blobs", help="map family (default: %(default)s)")
    g.add_argument("--height", type=int, default=32, help="map height (default: %(default)s)")
    g.add_argument("--width", type=int, default=32, help="map width (default: %(default)s)")
    if classes is None:
        g.add_argument("--classes", type=int, default=None,
                       help="number of classes C (default: file header or PGM max + 1, else 4)")
    else:
        g.add_argument("--classes", type=int, default=classes, help="number of classes C (default: %(default)s)")
    g.add_argument("--count", type=int, default=count, help="training maps (default: %(default)s)")
    if eval_count is not None:
        g.add_argument("--eval-count", type=int, default=eval_count, help="held-out maps (default: %(default)s)")
    g.add_argument("--period", type=int, default=4, help="stripe/checker period (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="data, init and shuffle seed (default: %(default)s)")


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=0.01, help="base learning rate (default: %(default)s)")
    g.add_argument("--iters", type=int, default=2000, help="total iterations (default: %(default)s)")
    g.add_argument("--batch-size", type=int, default=8, help="maps per step (default: %(default)s)")
    g.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: %(default)s)")
    g.add_argument("--poly-power", type=float, default=0.9, help="poly schedule power (default: %(default)s)")
    g.add_argument("--weight-decay", type=float, default=0.0, help="L2 penalty (default: %(default)s)")
    g.add_argument("--init-std", type=float, default=0.1, help="Gaussian init std (default: %(default)s)")
    g.add_argument("--log-every", type=int, default=10, help="log interval (default: %(default)s)")
    g.add_argument("--stop-loss", type=float, default=None, help="stop once batch loss is below this (default: off)")
    g.add_argument("--code-dim", type=int, default=DEFAULT_CODE_DIM,
                   help="codec size for dupsample heads, capped at r*r*C (default: %(default)s)")
    g.add_argument("--frozen-temperature", action="store_true", help="keep T fixed at 1 (default: learnable)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI file with one section per command")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: %(default)s)")

    top = argparse.ArgumentParser(prog="dupsample", description="Data-dependent upsampling desk experiments.",
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", metavar="COMMAND", required=True)
    subs = {}

    p = sub.add_parser("fit-codec", parents=[common], help="fit a label codec and report its upper bound")
    p.add_argument("--labels", type=Path, nargs="+", default=None, help="DUPL/PGM label files (default: synthetic)")
    p.add_argument("--r", type=int, default=4, help="patch size (default: %(default)s)")
    p.add_argument("--code-dim", type=int, default=None, help="code size C~ (default: min(64, r*r*C))")
    p.add_argument("--method", choices=["pca", "sgd"], default="pca", help="fitting method (default: %(default)s)")
    p.add_argument("--sgd-steps", type=int, default=5000, help="gradient steps for sgd (default: %(default)s)")
    p.add_argument("--sgd-lr", type=float, default=0.05, help="step size for sgd (default: %(default)s)")
    _add_data(p, classes=None, eval_count=None)
    subs["fit-codec"] = p

    p = sub.add_parser("upper-bound", parents=[common], help="train the label-fed toy network and report mIOU")
    p.add_argument("--head", choices=["bilinear", "dupsample"], default="dupsample", help="final upsampling (default: %(default)s)")
    p.add_argument("--output-stride", type=int, choices=[16, 32], default=32, help="encoder stride (default: %(default)s)")
    p.add_argument("--eval-split", choices=["heldout", "train"], default="heldout",
                   help="maps scored for the reported mIOU (default: %(default)s)")
    _add_data(p)
    _add_train(p)
    subs["upper-bound"] = p

    p = sub.add_parser("compare-decoders", parents=[common], help="FLOPS and mIOU for fusion schemes")
    p.add_argument("--schemes", type=_csv_list, default=["vanilla", "proposed"],
                   help="comma-separated subset of none,vanilla,proposed (default: vanilla,proposed)")
    p.add_argument("--tap-layer", type=int, default=1, help="0-based encoder tap (default: %(default)s)")
    p.add_argument("--head", choices=["bilinear", "dupsample"], default="bilinear", help="final upsampling (default: %(default)s)")
    p.add_argument("--output-stride", type=int, choices=[16, 32], default=32, help="encoder stride (default: %(default)s)")
    p.add_argument("--decoder-hidden", type=_int_list, default=(), help="hidden decoder widths, comma-separated (default: none)")
    p.add_argument("--decoder-kernel", type=int, default=1, help="decoder kernel size (default: %(default)s)")
    _add_data(p)
    _add_train(p)
    subs["compare-decoders"] = p

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every analytic gradient")
    p.add_argument("--threshold", type=float, default=1e-4, help="max relative error allowed (default: %(default)s)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default: %(default)s)")
    p.add_argument("--samples", type=int, default=200, help="coordinates sampled for the full model (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and sampling (default: %(default)s)")
    p.add_argument("--corrupt", choices=list(GRAD_OPS), default=None,
                   help="test hook: perturb the analytic gradient of one op (default: off)")
    subs["grad-check"] = p
    return top, subs


# ---------------------------------------------------------------- config file


def apply_config(path: Path, subs: dict[str, argparse.ArgumentParser]) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for section in cp.sections():
        if section not in subs:
            raise UsageError(f"config {path}: unknown section [{section}]")
        parser = subs[section]
        actions = {a.dest: a for a in parser._actions}
        values = {}
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            action = actions.get(dest)
            if action is None or dest in ("help", "config"):
                raise UsageError(f"config {path}: unknown key {key!r} in [{section}]")
            try:
                if isinstance(action, argparse._StoreTrueAction):
                    values[dest] = cp.getboolean(section, key)
                elif action.nargs in ("+", "*"):
                    values[dest] = [action.type(t) if action.type else t for t in raw.split()]
                else:
                    values[dest] = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config {path}: bad value for {key!r}: {exc}") from None
            if action.choices is not None and values[dest] not in action.choices:
                raise UsageError(f"config {path}: {key} must be one of {list(action.choices)}")
        parser.set_defaults(**values)


# ---------------------------------------------------------------- helpers


def _maps(args, with_eval=True):
    spec = SynthSpec(args.kind, args.height, args.width, args.classes, seed=args.seed, period=args.period)
    n_eval = args.eval_count if with_eval else 0
    maps = generate_dataset(spec, args.count + n_eval)
    return maps[: args.count], maps[args.count :]


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(base_lr=args.lr, total_iters=args.iters, poly_power=args.poly_power, momentum=args.momentum,
                       batch_size=args.batch_size, seed=args.seed, log_every=args.log_every,
                       weight_decay=args.weight_decay, stop_loss=args.stop_loss)


def _codec_for(maps, r, classes, code_dim):
    patches = extract_patches(maps, r, classes)
    return fit_pca(patches, min(code_dim, patches.n))


def _run_toy(args, maps, spec: FusionSpec, head_kind: str, r: int, **model_kw):
    """Train one label-fed configuration; returns (model, head, log, codec or None)."""
    C = args.classes
    codec = _codec_for(maps, r, C, args.code_dim) if head_kind == "dupsample" else None
    head = Head(head_kind, codec, learn_temperature=not args.frozen_temperature)
    out = codec.code_dim if codec is not None else C
    model = init_model(C, out, spec, output_stride=args.output_stride, init_std=args.init_std,
                       seed=args.seed, **model_kw)
    log = train(model, spec, head, gt_fed_dataset(maps, C), _train_cfg(args))
    return model, head, log, codec


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(args, outputs: list[str], inputs: list[str], started: float, status: str) -> None:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("command",)}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "status": status,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(timespec="seconds"),
        "duration_s": round(time.time() - started, 3),
    }
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def cmd_fit_codec(args) -> tuple[int, list[str], list[str]]:
    inputs = []
    if args.labels:
        maps = []
        classes = None
        for path in args.labels:
            labels, c = read_labelmap(path, classes=args.classes)
            if classes is not None and c != classes:
                raise UsageError(f"{path}: declares C={c}, earlier files have C={classes}")
            classes = c
            maps.append(labels)
            inputs.append(str(path))
    else:
        if args.classes is None:
            args.classes = 4
        maps, _ = _maps(args, with_eval=False)
        classes = args.classes
    patches = extract_patches(maps, args.r, classes)
    code_dim = args.code_dim if args.code_dim is not None else min(DEFAULT_CODE_DIM, patches.n)
    if not 1 <= code_dim <= patches.n:
        raise UsageError(f"--code-dim must lie in [1, {patches.n}] for r={args.r}, C={classes}")
    if args.method == "pca":
        codec = fit_pca(patches, code_dim)
    else:
        codec = fit_sgd(patches, code_dim, steps=args.sgd_steps, lr=args.sgd_lr, seed=args.seed)
    (args.out / "codec.dupc").write_bytes(codec_to_bytes(codec))
    ub = codec_upper_bound(codec, maps)
    write_csv(args.out / "report.csv", ["code_dim", "reconstruction_error", "train_miou_upper_bound", "train_pixel_acc_upper_bound"],
              [[code_dim, reconstruction_error(codec, patches), ub.miou, ub.pixel_accuracy]])
    print(f"code_dim={code_dim} reconstruction_error={reconstruction_error(codec, patches):.9g} "
          f"train_miou_upper_bound={ub.miou:.9g}")
    return 0, ["codec.dupc", "report.csv"], inputs


def cmd_upper_bound(args):
    train_maps, eval_maps = _maps(args)
    if args.eval_split == "heldout" and not eval_maps:
        raise UsageError("--eval-split heldout needs --eval-count >= 1")
    scored = eval_maps if args.eval_split == "heldout" else train_maps
    model, head, log, codec = _run_toy(args, train_maps, FusionSpec(), args.head, args.output_stride)
    rep = evaluate(model, FusionSpec(), head, gt_fed_dataset(scored, args.classes), args.classes)
    outputs = ["result.csv", "train_log.csv", "model.dupm"]
    (args.out / "train_log.csv").write_text(log.to_csv())
    (args.out / "model.dupm").write_bytes(log.checkpoint)
    if codec is not None:
        (args.out / "codec.dupc").write_bytes(codec_to_bytes(codec))
        outputs.append("codec.dupc")
    f = log.final
    write_csv(args.out / "result.csv",
              ["head", "output_stride", "eval_split", "miou", "pixel_acc", "train_miou", "iterations", "final_loss", "T"],
              [[args.head, args.output_stride, args.eval_split, rep.miou, rep.pixel_acc, f["train_miou"],
                f["iterations"], f["final_loss"], f["T"]]])
    print(f"head={args.head} os={args.output_stride} {args.eval_split} miou={rep.miou:.9g} pixel_acc={rep.pixel_acc:.9g}")
    return 0, outputs, []


def cmd_compare_decoders(args):
    bad = [s for s in args.schemes if s not in ("none", "vanilla", "proposed")]
    if bad or not args.schemes:
        raise UsageError(f"--schemes: unknown scheme(s) {bad}")
    n_layers = 5
    if not 0 <= args.tap_layer < n_layers:
        raise UsageError(f"--tap-layer must lie in [0, {n_layers - 1}]")
    if args.decoder_kernel < 1 or args.decoder_kernel % 2 == 0:
        raise UsageError("--decoder-kernel must be a positive odd number")
    train_maps, eval_maps = _maps(args)
    scored = eval_maps if eval_maps else train_maps
    rows = []
    for scheme in args.schemes:
        spec = FusionSpec(scheme, None if scheme == "none" else args.tap_layer)
        tap_ratio = int(np.prod(encoder_strides(args.output_stride, n_layers)[: args.tap_layer + 1]))
        r = tap_ratio if scheme == "vanilla" else args.output_stride
        model, head, log, codec = _run_toy(args, train_maps, spec, args.head, r,
                                           decoder_hidden=args.decoder_hidden, decoder_kernel=args.decoder_kernel)
        flops = count_flops(model, spec, head, args.height, args.width)
        rep = evaluate(model, spec, head, gt_fed_dataset(scored, args.classes), args.classes)
        rows.append([scheme, "" if scheme == "none" else args.tap_layer, args.head, r, flops.total,
                     flops.encoder_total, rep.miou, rep.pixel_acc])
        print(f"{scheme}: decoder_madds={flops.total} eval_miou={rep.miou:.9g}")
    write_csv(args.out / "compare.csv",
              ["scheme", "tap_layer", "head", "upsample_ratio", "decoder_madds", "encoder_madds", "eval_miou", "eval_pixel_acc"],
              rows)
    return 0, ["compare.csv"], []


def _gc_conv(rng):
    x = rng.normal(size=(7, 6, 3))
    k = ConvKernel(rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4), stride=2, padding=1)
    g = rng.normal(size=(4, 3, 4))

    def f(ps):
        kk = ConvKernel(ps[1], ps[2], k.stride, k.padding)
        gx, gw, gb = conv2d_backward(ps[0], kk, g)
        return float(np.sum(conv2d_forward(ps[0], kk) * g)), [gx, gw, gb]

    return f, [x, k.weights.copy(), k.bias.copy()]


def _gc_bilinear(rng):
    x = rng.normal(size=(3, 4, 2))
    g = rng.normal(size=(7, 5, 2))
    return (lambda ps: (float(np.sum(bilinear_resize(ps[0], 7, 5) * g)), [bilinear_resize_backward(g, 3, 4)])), [x]


def _gc_softmax_t(rng):
    z = rng.normal(size=(5,)) * 2
    t = np.array(2)

    def f(ps):
        loss, gz, gT = softmax_t_ce_backward(ps[0], float(ps[1][0]), t)
        return float(loss), [gz, np.array([gT])]

    return f, [z, np.array([0.8])]


def _gc_with_T(loss, F):
    def f(ps):
        rep = loss(ps[0], float(ps[1][0]))
        return rep.value, [rep.grads["F"], np.array([rep.grads["T"]])]

    return f, [F, np.array([0.7])]


def _gc_loss_bilinear(rng):
    Y = rng.integers(0, 3, (8, 8))
    return _gc_with_T(lambda F, T: loss_bilinear(F, Y, T), rng.normal(size=(2, 2, 3)))


def _random_codec(rng, r, c, k):
    n = r * r * c
    return LabelCodec(r, c, k, rng.random(n), rng.normal(size=(k, n)), rng.normal(size=(n, k)) * 0.5)


def _gc_dupsample(rng):
    codec = _random_codec(rng, 2, 3, 4)
    Y = rng.integers(0, 3, (4, 6))
    return _gc_with_T(lambda F, T: loss_dupsample(F, Y, codec, T), rng.normal(size=(2, 3, 4)))


def _gc_regression(rng):
    target = rng.normal(size=(2, 3, 4))
    return (lambda ps: (loss_regression(ps[0], target).value, [loss_regression(ps[0], target).grads["F"]])), \
        [rng.normal(size=(2, 3, 4))]


def _gc_model(rng):
    C = 3
    spec = FusionSpec("proposed", tap_layer=1)
    model = init_model(C, C, spec, widths=(4, 6, 6), output_stride=4, decoder_hidden=(5,), decoder_kernel=3,
                       init_std=0.5, seed=int(rng.integers(1 << 31)))
    Y = rng.integers(0, C, (16, 16))
    x = np.eye(C)[Y]

    def f(ps):
        _set_params(model, ps)
        rep = model_forward_loss(model, spec, Head("bilinear"), x, Y)
        return rep.value, _flat_grads(rep, True)

    return f, _params(model)


GRAD_OPS = {
    "conv2d": _gc_conv,
    "bilinear": _gc_bilinear,
    "softmax_t": _gc_softmax_t,
    "loss_bilinear": _gc_loss_bilinear,
    "loss_dupsample": _gc_dupsample,
    "loss_regression": _gc_regression,
    "full_model": _gc_model,
}


def _corrupted(fn):
    def f(ps):
        loss, grads = fn(ps)
        grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
        grads[0].reshape(-1)[0] += 0.1 * (1.0 + abs(grads[0].reshape(-1)[0]))
        return loss, grads

    return f


def cmd_grad_check(args):
    rows = []
    worst = 0.0
    for name, build in GRAD_OPS.items():
        rng = np.random.default_rng([args.seed, len(rows)])
        fn, params = build(rng)
        if args.corrupt == name:
            fn = _corrupted(fn)
        mode = "sampled" if name == "full_model" else "full"
        res = grad_check(fn, params, eps=args.eps, mode=mode, samples=args.samples, seed=args.seed)
        ok = res.max_rel_error < args.threshold
        worst = max(worst, res.max_rel_error)
        rows.append([name, res.max_rel_error, res.worst_coordinate[0], res.worst_coordinate[1], res.checked,
                     "pass" if ok else "FAIL"])
        print(f"{name:16s} max_rel_error={res.max_rel_error:.3e} worst=param{res.worst_coordinate[0]}"
              f"[{res.worst_coordinate[1]}] {'pass' if ok else 'FAIL'}")
    write_csv(args.out / "grad_check.csv", ["op", "max_rel_error", "worst_param", "worst_index", "checked", "status"], rows)
    failed = any(r[-1] == "FAIL" for r in rows)
    return (1 if failed else 0), ["grad_check.csv"], []


HANDLERS = {
    "fit-codec": cmd_fit_codec,
    "upper-bound": cmd_upper_bound,
    "compare-decoders": cmd_compare_decoders,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config is not None:
            apply_config(known.config, subs)
    except UsageError as exc:
        print(f"dupsample: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    started = time.time()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        code, outputs, inputs = HANDLERS[args.command](args)
    except DivergenceError as exc:
        print(f"dupsample {args.command}: training diverged at iteration {exc.iteration}", file=sys.stderr)
        write_manifest(args, [], [], started, f"diverged at iteration {exc.iteration}")
        return 1
    except (UsageError, LabelFormatError, ShapeError, ValueError, OSError) as exc:
        print(f"dupsample {args.command}: error: {exc}", file=sys.stderr)
        return 2
    write_manifest(args, outputs, inputs, started, "ok" if code == 0 else "check failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
