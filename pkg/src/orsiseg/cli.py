"""``orsiseg`` command line: train, eval, infer, summary, synth.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Errors go to
stderr as ``ERROR:<code>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, resolve_config
from .data import DataError, DatasetSpec, load_dataset, pair_files, read_image, read_mask, resolve_split_dir, synth_dataset

log = logging.getLogger("orsiseg")


class UsageError(Exception):
    """Invalid or missing flag value."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; usage problems are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERROR:usage: {message}", file=sys.stderr)
        sys.exit(1)


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.required:
            return f"{action.help} (required)"
        return super()._get_help_string(action)


def _error_code(exc: BaseException) -> tuple[int, str]:
    from .runtime.checkpoint import CheckpointError, CheckpointMismatchError
    from .runtime.train import NonFiniteLossError

    if isinstance(exc, CheckpointMismatchError):
        return 1, "config-mismatch"
    if isinstance(exc, CheckpointError):
        return 1, "checkpoint"
    if isinstance(exc, ConfigError):
        return 1, "config"
    if isinstance(exc, DataError):
        return 1, "data"
    if isinstance(exc, UsageError):
        return 1, "usage"
    if isinstance(exc, NonFiniteLossError):
        return 2, "non-finite"
    return 2, "runtime"


# subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    from .runtime.train import train

    model_cfg, train_cfg = resolve_config(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    spec = DatasetSpec(args.data_dir, "train", model_cfg.input_size, train_cfg.augment)
    dataset = load_dataset(spec)
    if len(dataset) == 0:
        raise DataError(f"no training pairs in {dataset.split_dir}")
    result = train(None if args.resume else model_cfg, train_cfg, dataset, args.out_dir, resume=args.resume)
    print(f"epochs completed: {result.last_epoch}")
    if result.checkpoints:
        print(f"last checkpoint: {result.checkpoints[-1]}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    from PIL import Image

    from .metrics import evaluate_directory, write_report
    from .plotting import plot_metric_summary, plot_prediction_grid
    from .runtime.infer import load_for_inference, predict, to_uint8

    split_dir = resolve_split_dir(args.data_dir, "test")
    pairs = pair_files(split_dir)
    if not pairs:
        raise DataError("no evaluation pairs")
    model, cfg = load_for_inference(args.checkpoint)
    out = Path(args.report_out)
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    grid = []
    for key, img_path, mask_path in pairs:
        image = read_image(img_path)
        prob = predict(model, image, cfg.input_size)
        pred = to_uint8(prob)
        Image.fromarray(pred).save(pred_dir / f"{key}.png")
        if len(grid) < 4:
            grid.append((key, image.transpose(1, 2, 0), read_mask(mask_path, prob.shape)[0], pred / 255.0))
    evaluation = evaluate_directory(pred_dir, split_dir / "masks")
    evaluation.dataset = split_dir.name
    paths = write_report(evaluation, out)
    plot_metric_summary(evaluation.report.to_dict(), out / "metrics.png")
    plot_prediction_grid(grid, out / "predictions_grid.png")
    report = evaluation.report
    for key in ("fwb", "fm_max", "s_measure", "e_measure", "mae"):
        print(f"{key:<10} {getattr(report, key):.4f}")
    print(f"n_images   {report.n_images}")
    print(f"report: {paths['json']}")
    return 0


def cmd_infer(args) -> int:
    from .runtime.infer import infer

    written = infer(args.checkpoint, args.input, args.out_dir)
    print(f"wrote {len(written)} maps to {args.out_dir}")
    return 0


def cmd_summary(args) -> int:
    from .runtime.budget import budget_audit

    model_cfg, _ = resolve_config(args.config)
    size = model_cfg.input_size
    if args.input_size is not None:
        if args.input_size < 32 or args.input_size % 32:
            raise UsageError(f"--input-size {args.input_size} must be a positive multiple of 32")
        size = (args.input_size, args.input_size)
    report = budget_audit(model_cfg, size)
    print(report.to_json() if args.json else report.table())
    return 0


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.size < 32 or args.size % 32:
        raise UsageError(f"--size {args.size} must be a positive multiple of 32")
    out = synth_dataset(args.out_dir, args.n, args.size, args.seed)
    print(f"wrote {args.n} pairs to {out / 'train'}")
    return 0


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="orsiseg", description="Salient object segmentation toolkit.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)
    config_help = "config file, or a preset name: paper, desk"

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", default="paper", help=config_help)
    p.add_argument("--data-dir", required=True, help="dataset root (with train/) or a split directory")
    p.add_argument("--out-dir", required=True, help="where checkpoints and logs go")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predict a split and score it", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--data-dir", required=True, help="dataset root (with test/) or a split directory")
    p.add_argument("--report-out", required=True, help="directory for report.json, report.csv, figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write saliency maps for images", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--input", required=True, help="image file or directory of images")
    p.add_argument("--out-dir", required=True, help="output directory for PNG maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("summary", help="parameter and FLOP budget", formatter_class=fmt)
    p.add_argument("--config", default="paper", help=config_help)
    p.add_argument("--input-size", type=int, default=None, help="square input side (config value if omitted)")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, default=16, help="number of image/mask pairs")
    p.add_argument("--size", type=int, default=96, help="image side in pixels")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--out-dir", required=True, help="dataset root to write")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code, tag = _error_code(exc)
        print(f"ERROR:{tag}: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return code


if __name__ == "__main__":
    sys.exit(main())
