"""
Command line entry point: vitae <command> [options].

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 training divergence.
"""

import argparse
import functools
import logging
import os
import sys
from dataclasses import replace

from vitae import __version__
from vitae.ablation import load_matrix, run_ablation
from vitae.analysis import (
    attention_distance, count_macs, count_params, export_attention_matrices, export_csv, export_pgm, grad_cam)
from vitae.checkpoint import load_checkpoint
from vitae.config import PRESETS, SyntheticSpec, load_cli_config, preset
from vitae.data import gen_synthetic, load_data, load_idx, write_idx
from vitae.errors import ConfigurationError, UsageError, VerificationError, VitaeError
from vitae.gradcheck import EPS_RANGE, check_model
from vitae.model import ViTAE, build_model
from vitae.tensor import inject_fault, set_num_threads
from vitae.train import Trainer, evaluate


logger = logging.getLogger(__name__)

GRADCHECK_THRESHOLD = 1e-5


def exit_on_error(func):
    """Run a command, turning package errors into their exit codes."""
    @functools.wraps(func)
    def wrapper(args):
        try:
            result = func(args)
        except VitaeError as ex:
            logger.error("%s", ex)
            return ex.exit_code
        return 0 if result is None else result
    return wrapper


def _model_config(args):
    config = getattr(args, "config", None)
    if config:
        return load_cli_config(config).model
    return preset(args.preset)


def _analysis_set(args, cfg, normalization):
    h, w, c = cfg.input_size
    if args.data == "synthetic":
        spec = SyntheticSpec(canvas=h, num_classes=min(3, cfg.num_classes),
                             samples_per_class=args.samples_per_class, seed=args.data_seed)
        if h != w or c != 1:
            raise ConfigurationError("synthetic data is square and single-channel; model expects {}x{}x{}".format(h, w, c))
        ds = gen_synthetic(spec)
    else:
        if not args.labels:
            raise ConfigurationError("--labels is required with an IDX --data file")
        ds = load_idx(args.data, args.labels)
        if ds.image_shape != (c, h, w):
            raise ConfigurationError("{}: images are {}, model expects {}".format(args.data, ds.image_shape, (c, h, w)))
    if normalization:
        ds = ds.with_normalization(normalization["mean"], normalization["std"])
    return ds


def _load_model(args):
    cfg = load_cli_config(args.config).model if getattr(args, "config", None) else None
    ckpt = load_checkpoint(args.checkpoint, cfg)
    return ViTAE(ckpt.model_config, ckpt.params), ckpt


@exit_on_error
def cmd_train(args):
    if not args.config:
        raise ConfigurationError("--config is required; it names the training data, also when resuming")
    config = load_cli_config(args.config).with_overrides(
        data_fraction=args.data_fraction, epochs=args.epochs, seed=args.seed)
    if args.seed is not None:
        config = replace(config, model=replace(config.model, seed=args.seed))
    output_dir = args.output_dir or config.output_dir
    train_set, val_set = load_data(config.data)
    if args.resume:
        trainer = Trainer.resume(args.resume, train_set, val_set, output_dir, config.train)
    else:
        trainer = Trainer(config.model, config.train, train_set, val_set, output_dir)
    metrics = trainer.fit()
    if metrics:
        last = metrics[-1]
        print("epoch {}: train loss {:.4f}, val loss {:.4f}, val top-1 {:.4f}".format(
            last.epoch, last.train_loss, last.val_loss, last.val_top1))
    print("metrics: {}".format(os.path.join(output_dir, "metrics.csv")))


@exit_on_error
def cmd_evaluate(args):
    model, ckpt = _load_model(args)
    ds = _analysis_set(args, model.cfg, ckpt.normalization)
    top1, loss = evaluate(model, ds, args.batch_size)
    print("samples {}  top-1 {:.4f}  loss {:.4f}".format(len(ds), top1, loss))


@exit_on_error
def cmd_build(args):
    cfg = _model_config(args)
    params, plan = build_model(cfg, initialize=False)
    for line in plan.describe():
        print(line)
    print("parameters {:,}".format(params.num_elements()))


@exit_on_error
def cmd_gradcheck(args):
    if not EPS_RANGE[0] <= args.eps <= EPS_RANGE[1]:
        raise UsageError("--eps {} outside [{}, {}]".format(args.eps, *EPS_RANGE))
    cfg = _model_config(args)
    if args.inject_fault:
        inject_fault(args.inject_fault)
    try:
        report = check_model(cfg, args.eps, args.seed, args.batch, args.entries, args.scale)
    finally:
        if args.inject_fault:
            inject_fault(args.inject_fault, None)
    for module, error in report.by_module().items():
        print("{:<12} {:.3e}".format(module, error))
    print("worst {:.3e} over {} tensors".format(report.worst(), len(report.errors)))
    offenders = report.offenders(GRADCHECK_THRESHOLD)
    if offenders:
        raise VerificationError("gradient check failed (>= {:g}) for: {}".format(GRADCHECK_THRESHOLD, ", ".join(offenders)))
    logger.info("gradient check passed")


@exit_on_error
def cmd_params(args):
    cfg = _model_config(args)
    params, _ = build_model(cfg, initialize=False)
    report = count_params(params)
    print(report.format_table())
    if args.csv:
        export_csv(report, args.csv)


@exit_on_error
def cmd_macs(args):
    cfg = _model_config(args)
    size = None if args.input is None else (args.input, args.input)
    report = count_macs(cfg, size)
    print(report.format_table())
    if args.csv:
        export_csv(report, args.csv)


@exit_on_error
def cmd_attn_dist(args):
    model, ckpt = _load_model(args)
    ds = _analysis_set(args, model.cfg, ckpt.normalization)
    count = min(args.count, len(ds))
    report = attention_distance(model, ds.normalize(ds.images[:count]))
    os.makedirs(args.output_dir, exist_ok=True)
    export_csv(report, os.path.join(args.output_dir, "attn_dist.csv"))
    if args.dump_matrices:
        export_attention_matrices(report, args.output_dir)
    for row in report.rows:
        print("{:<6} {:>5}  {:.4f}".format(row.layer, "{}x{}".format(*row.grid), row.mean_distance))


@exit_on_error
def cmd_cam(args):
    model, ckpt = _load_model(args)
    if args.target is not None and not 0 <= args.target < model.cfg.num_classes:
        raise ConfigurationError("--class {} outside [0, {})".format(args.target, model.cfg.num_classes))
    ds = _analysis_set(args, model.cfg, ckpt.normalization)
    stop = min(args.index + args.count, len(ds))
    if args.index >= stop:
        raise ConfigurationError("--index {} beyond the {} available images".format(args.index, len(ds)))
    images = ds.normalize(ds.images[args.index:stop])
    targets = model.predict(images).argmax(axis=1) if args.target is None else [args.target] * len(images)
    for offset, (image, target) in enumerate(zip(images, targets)):
        image_id = args.index + offset
        grid = grad_cam(model, image, int(target), image_id)
        path = export_pgm(grid, os.path.join(args.output_dir, "cam_{}.pgm".format(image_id)))
        print("{} (class {})".format(path, int(target)))


@exit_on_error
def cmd_ablate(args):
    base, variants = load_matrix(args.matrix)
    output_dir = args.output_dir or base.output_dir
    frame = run_ablation(base, variants, output_dir, args.epochs)
    print(frame.to_string(index=False))
    print("ablation: {}".format(os.path.join(output_dir, "ablation.csv")))


@exit_on_error
def cmd_synth(args):
    spec = SyntheticSpec(canvas=args.canvas, samples_per_class=args.samples_per_class, noise_std=args.noise_std,
                         seed=args.seed)
    ds = gen_synthetic(spec)
    os.makedirs(args.output_dir, exist_ok=True)
    images = os.path.join(args.output_dir, "images-idx3-ubyte")
    labels = os.path.join(args.output_dir, "labels-idx1-ubyte")
    write_idx(ds, images, labels)
    print("{}\n{}".format(images, labels))


def _add_model_source(parser, default_preset):
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--preset", default=default_preset, choices=sorted(PRESETS), help="compiled-in model preset")
    group.add_argument("--config", help="JSON run config whose model section is used")


def _add_analysis_data(parser):
    parser.add_argument("--checkpoint", required=True, help="checkpoint file (.vtae)")
    parser.add_argument("--config", help="JSON run config the checkpoint must match")
    parser.add_argument("--data", default="synthetic", help="IDX images file, or 'synthetic'")
    parser.add_argument("--labels", help="IDX labels file for --data")
    parser.add_argument("--samples-per-class", type=int, default=8, help="synthetic images per class")
    parser.add_argument("--data-seed", type=int, default=1, help="synthetic data seed")


def build_parser():
    parser = argparse.ArgumentParser(prog="vitae", description="ViTAE vision transformer desk toolkit")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("train", help="train a model from a JSON config")
    sub.add_argument("--config", help="JSON run config")
    sub.add_argument("--data-fraction", type=float, help="fraction of the training set in (0, 1]")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--output-dir")
    sub.add_argument("--resume", help="continue from this checkpoint")
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("evaluate", help="top-1 and loss of a checkpoint")
    _add_analysis_data(sub)
    sub.add_argument("--batch-size", type=int, default=256)
    sub.set_defaults(handler=cmd_evaluate, samples_per_class=100)

    sub = commands.add_parser("build", help="print the cell shape trace of a model")
    _add_model_source(sub, "vitae-t")
    sub.set_defaults(handler=cmd_build)

    sub = commands.add_parser("gradcheck", help="finite-difference check of every parameter (float64)")
    _add_model_source(sub, "vitae-micro")
    sub.add_argument("--eps", type=float, default=1e-4)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--batch", type=int, default=2)
    sub.add_argument("--entries", type=int, help="sample this many entries per tensor (default: all)")
    sub.add_argument("--scale", type=float, default=0.3, help=argparse.SUPPRESS)
    sub.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    sub.set_defaults(handler=cmd_gradcheck)

    for name, handler, text in (("params", cmd_params, "parameter counts per module"),
                                ("macs", cmd_macs, "multiply-accumulates per layer")):
        sub = commands.add_parser(name, help=text)
        _add_model_source(sub, "vitae-t")
        sub.add_argument("--input", type=int, help="square input size (default: the config's)")
        sub.add_argument("--csv", help="also write the report as CSV")
        sub.set_defaults(handler=handler)

    sub = commands.add_parser("attn-dist", help="mean attention distance per layer")
    _add_analysis_data(sub)
    sub.add_argument("--count", type=int, default=8, help="number of images")
    sub.add_argument("--output-dir", default=".")
    sub.add_argument("--dump-matrices", action="store_true", help="also write averaged attention matrices")
    sub.set_defaults(handler=cmd_attn_dist)

    sub = commands.add_parser("cam", help="Grad-CAM maps of the last normal cell")
    _add_analysis_data(sub)
    sub.add_argument("--class", dest="target", type=int, help="target class (default: predicted)")
    sub.add_argument("--index", type=int, default=0, help="first image")
    sub.add_argument("--count", type=int, default=1, help="number of images")
    sub.add_argument("--output-dir", default=".")
    sub.set_defaults(handler=cmd_cam)

    sub = commands.add_parser("ablate", help="train every variant of an ablation matrix")
    sub.add_argument("--matrix", required=True, help="JSON ablation matrix")
    sub.add_argument("--epochs", type=int, help="override the base epochs")
    sub.add_argument("--output-dir")
    sub.set_defaults(handler=cmd_ablate)

    sub = commands.add_parser("synth", help="write the synthetic shape set as IDX files")
    sub.add_argument("--canvas", type=int, default=64)
    sub.add_argument("--samples-per-class", type=int, default=500)
    sub.add_argument("--noise-std", type=float, default=0.05)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--output-dir", default=".")
    sub.set_defaults(handler=cmd_synth)
    return parser


def _setup_logging(verbose):
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    logging.getLogger("vitae").setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return ex.code if isinstance(ex.code, int) else 0
    _setup_logging(args.verbose)
    threads = os.environ.get("VITAE_THREADS")
    if threads:
        try:
            set_num_threads(int(threads))
        except ValueError:
            logger.error("VITAE_THREADS must be an integer, got %r", threads)
            return ConfigurationError.exit_code
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
