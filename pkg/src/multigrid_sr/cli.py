"""Command-line interface: ``multigrid-sr <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import generator as G
from . import losses
from .data import list_images, prep_dataset
from .imageio import read_image, write_image
from .plan import DEFAULT_SCHEDULE, describe, parameter_count, unfold
from .resample import downscale, pre_upscale
from .tiling import TileConfig, ensemble_upscale, upscale_image
from .weights_io import generator_header_size, load_weights, save_weights

log = logging.getLogger("multigrid_sr")


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message.replace("\n", " "))


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_plan_args(p):
    p.add_argument("--mu", type=int, default=2, help="recursive steps per level")
    p.add_argument("--levels", type=int, default=6, help="number of resolution levels")
    p.add_argument("--schedule", type=_ints, default=None,
                   help="feature widths low->high resolution (default: last LEVELS of "
                        + ",".join(map(str, DEFAULT_SCHEDULE)) + ")")
    p.add_argument("--filter-size", type=int, default=3, help="odd filter size")


def _plan_from(args):
    try:
        return unfold(args.mu, args.levels, args.schedule, args.filter_size)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def _add_tile_args(p):
    p.add_argument("--patch", type=int, default=128, help="patch size in output pixels")
    p.add_argument("--stride", type=int, default=64, help="distance between patch origins")
    p.add_argument("--noise-amplitude", type=float, default=0.0, help="noise amplitude W in [0, 1]")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--scale", type=int, default=16, help="upscaling factor")
    p.add_argument("--workers", type=int, default=1, help="patch worker threads")


def _tile_config(args):
    if not 0.0 <= args.noise_amplitude <= 1.0:
        raise CliError("config", f"--noise-amplitude must be in [0, 1], got {args.noise_amplitude}")
    if args.patch < 2 or not 1 <= args.stride <= args.patch:
        raise CliError("config", f"need 2 <= patch and 1 <= stride <= patch, got {args.patch}/{args.stride}")
    return TileConfig(args.patch, args.stride, args.noise_amplitude, args.seed, args.scale, args.workers)


def _need_file(path):
    if not Path(path).exists():
        raise CliError("missing-file", f"{path} does not exist")
    return path


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="multigrid-sr", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", help="print the unfolded network plan", formatter_class=fmt)
    _add_plan_args(p)
    p.add_argument("--height", type=int, default=1000, help="input height for the MAC tally")
    p.add_argument("--width", type=int, default=1000, help="input width for the MAC tally")
    p.add_argument("--brief", action="store_true", help="omit the per-instance listing")

    p = sub.add_parser("init", help="write seeded random generator weights", formatter_class=fmt)
    _add_plan_args(p)
    p.add_argument("--seed", type=int, default=0, help="initialisation seed")
    p.add_argument("out", help="output weight file")

    p = sub.add_parser("prep", help="cut source images into patch folders", formatter_class=fmt)
    p.add_argument("src", help="directory of source images")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--prep-patch", type=int, default=192, help="stored patch size")
    p.add_argument("--prep-stride", type=int, default=96, help="distance between stored patches")
    p.add_argument("--workers", type=int, default=1, help="parallel image workers")

    p = sub.add_parser("train", help="train the generator", formatter_class=fmt)
    p.add_argument("track", choices=["fidelity", "perceptual"], help="training track")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", default=None, help="prepared dataset directory")
    p.add_argument("--out-dir", default=None, help="checkpoint/log directory")
    p.add_argument("--val-dir", default=None, help="validation image directory")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--steps-per-epoch", type=int, default=None, help="override config steps per epoch")
    p.add_argument("--batch", type=int, default=None, help="override config batch size")
    p.add_argument("--train-patch", type=int, default=None, help="override config training patch size")
    p.add_argument("--lr", type=float, default=None, help="override config learning rate")
    p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("upscale", help="upscale an image with overlapping patches", formatter_class=fmt)
    p.add_argument("input", help="low-resolution PNG")
    p.add_argument("output", help="output PNG")
    p.add_argument("--weights", default=None, help="generator weight file")
    p.add_argument("--ensemble", default=None, help="comma-separated weight files to average")
    _add_tile_args(p)

    p = sub.add_parser("dfv", help="frozen-activation impulse response at one pixel", formatter_class=fmt)
    p.add_argument("input", help="low-resolution PNG (pre-upscaled by --scale)")
    p.add_argument("output", help="output PNG of the response")
    p.add_argument("--weights", required=True, help="generator weight file")
    p.add_argument("--row", type=int, default=None, help="pixel row in the upscaled image (default: centre)")
    p.add_argument("--col", type=int, default=None, help="pixel column in the upscaled image (default: centre)")
    p.add_argument("--channel", type=int, default=0, help="input channel of the impulse (3 = noise)")
    p.add_argument("--noise-amplitude", type=float, default=0.0, help="noise amplitude W")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--scale", type=int, default=16, help="pre-upscale factor (1 = input already upscaled)")

    p = sub.add_parser("eval", help="fidelity and no-reference scores over a directory", formatter_class=fmt)
    p.add_argument("images", help="directory of high-resolution images")
    p.add_argument("--weights", required=True, help="generator weight file")
    p.add_argument("--metric", choices=["contrast", "tv"], default="contrast",
                   help="no-reference metric stand-in")
    _add_tile_args(p)
    return parser


def _cmd_describe(args, out):
    plan = _plan_from(args)
    text = describe(plan, args.height, args.width)
    if args.brief:
        text = text.split("\ninstances:")[0]
    print(text, file=out)


def _cmd_init(args, out):
    plan = _plan_from(args)
    weights = G.init_weights(plan, seed=args.seed)
    save_weights(args.out, plan, weights)
    size = Path(args.out).stat().st_size
    print(f"wrote {args.out}: {parameter_count(plan)} parameters, {size} bytes "
          f"(header {generator_header_size(plan)})", file=out)


def _cmd_prep(args, out):
    _need_file(args.src)
    manifest = prep_dataset(args.src, args.out, args.prep_patch, args.prep_stride, workers=args.workers)
    total = sum(e.count for e in manifest.entries)
    print(f"images: {len(manifest.entries)} patches: {total} skipped: {len(manifest.skipped)} "
          f"errors: {len(manifest.errors)}", file=out)


def _cmd_train(args, out):
    from .train import load_config, make_config, train

    overrides = {
        "track": args.track, "data": args.data, "out_dir": args.out_dir, "val_dir": args.val_dir,
        "epochs": args.epochs, "steps_per_epoch": args.steps_per_epoch, "batch": args.batch,
        "train_patch": args.train_patch, "lr": args.lr, "seed": args.seed,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        if args.config:
            config = load_config(_need_file(args.config), **overrides)
        else:
            config = make_config(**overrides)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    if not config.data:
        raise CliError("config", "no dataset given (--data or 'data =' in the config)")
    _need_file(config.data)
    result = train(config)
    where = result.checkpoint.path if result.checkpoint else "none"
    print(f"best_validation: {result.best_value:.6g}\ncheckpoint: {where}", file=out)


def _load_systems(args):
    paths = []
    if args.ensemble:
        paths = [p for p in args.ensemble.split(",") if p]
    elif args.weights:
        paths = [args.weights]
    else:
        raise CliError("config", "give --weights or --ensemble")
    return [load_weights(_need_file(p), requires_grad=False) for p in paths]


def _cmd_upscale(args, out):
    config = _tile_config(args)
    systems = _load_systems(args)
    lr = read_image(_need_file(args.input))
    if len(systems) == 1:
        result = upscale_image(lr, *systems[0], config)
    else:
        result = ensemble_upscale(lr, systems, config)
    write_image(args.output, result)
    print(f"wrote {args.output}: {result.shape[2]}x{result.shape[1]}", file=out)


def _cmd_dfv(args, out):
    plan, weights = load_weights(_need_file(args.weights), requires_grad=False)
    img = read_image(_need_file(args.input))
    if args.scale > 1:
        img = pre_upscale(img, args.scale)
    _, h, w = img.shape
    row = h // 2 if args.row is None else args.row
    col = w // 2 if args.col is None else args.col
    try:
        resp = G.dfv_impulse_response(img, G.NoiseConfig(args.noise_amplitude, args.seed), plan, weights,
                                      (row, col), args.channel).data[0]
    except IndexError as exc:
        raise CliError("bounds", str(exc)) from None
    peak = float(np.abs(resp).max()) or 1.0
    write_image(args.output, 0.5 + 0.5 * resp / peak)
    print(f"wrote {args.output}: impulse at ({row}, {col}) channel {args.channel}, peak {peak:.4g}", file=out)


def _cmd_eval(args, out):
    config = _tile_config(args)
    plan, weights = load_weights(_need_file(args.weights), requires_grad=False)
    metric = losses.local_contrast_proxy if args.metric == "contrast" else losses.total_variation
    images = list_images(_need_file(args.images))
    if not images:
        raise CliError("missing-file", f"no images in {args.images}")
    fid, nr = [], []
    for path in images:
        hr = read_image(path)
        lr = downscale(hr, config.scale)
        y0 = upscale_image(lr, plan, weights, TileConfig(config.patch, config.stride, 0.0, config.seed,
                                                         config.scale, config.workers))
        y1 = upscale_image(lr, plan, weights, TileConfig(config.patch, config.stride, 1.0, config.seed,
                                                         config.scale, config.workers))
        y0 = y0[:, : hr.shape[1], : hr.shape[2]]
        y1 = y1[:, : hr.shape[1], : hr.shape[2]]
        v = float(losses.fidelity_validation(y0, hr).item())
        p = losses.perceptual_validation(y1, metric)
        fid.append(v)
        nr.append(p)
        print(f"{path.name}\tval_l2\t{v:.6g}\tpsnr\t{losses.psnr(v):.3f}\tnr_{args.metric}\t{p:.6g}", file=out)
    print(f"mean\tval_l2\t{np.mean(fid):.6g}\tpsnr\t{losses.psnr(np.mean(fid)):.3f}"
          f"\tnr_{args.metric}\t{np.mean(nr):.6g}", file=out)


COMMANDS = {
    "describe": _cmd_describe,
    "init": _cmd_init,
    "prep": _cmd_prep,
    "train": _cmd_train,
    "upscale": _cmd_upscale,
    "dfv": _cmd_dfv,
    "eval": _cmd_eval,
}


def run(argv=None, out=None, err=None):
    """Run the CLI; returns the process exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, out)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=err)
        return 2 if exc.code == "usage" else 1
    except (ValueError, OSError) as exc:
        code = str(getattr(exc, "code", None) or type(exc).__name__).replace(" ", "-")
        message = str(getattr(exc, "message", exc))
        print(f"error: {code}: {message.splitlines()[0] if message else ''}", file=err)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
