"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.

Every flag can also come from ``--config FILE``, a flat ``key = value`` text
file whose keys are flag names without the leading dashes (``bits-w = 4``).
Lines starting with ``#`` are ignored. Flags on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .ablation import run_ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, sample_calibration, save_dataset, toy_datasets
from .errors import ContractError, DataFormatError, NumericalError
from .fixture import DATA_SEED, FIXTURE_PATH
from .model import FP, ModelConfig, quantize_model
from .reconstruct import LossLog, ReconstructionConfig, run_mgrq
from .train import evaluate_top1, train_toy_fp

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("vitptq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser, defaults: ReconstructionConfig) -> None:
    p.add_argument("--config", type=Path, help="flat key = value file mirroring these flags")
    p.add_argument("--dataset", type=Path, help="dataset file (default: bundled toy task)")
    p.add_argument("--eval-dataset", type=Path, help="held-out dataset (default: bundled toy test split)")
    p.add_argument("--checkpoint-in", type=Path, help="input checkpoint (default: bundled fixture)")
    p.add_argument("--checkpoint-out", type=Path)
    p.add_argument("--report-out", type=Path, help="CSV output (loss log or ablation report)")
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--bits-w", type=int, default=4)
    p.add_argument("--bits-a", type=int, default=4)
    p.add_argument("--iters", type=int, default=defaults.iterations)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--batch", type=int, default=defaults.batch_size)
    p.add_argument("--calib-size", type=int, default=defaults.calib_size)
    p.add_argument("--alpha", type=float, help="fixed EBGS weight (disables auto-balance)")
    p.add_argument("--beta", type=float, help="fixed IBLS weight (disables auto-balance)")
    p.add_argument("--auto-balance", action="store_true", help="force block-wise auto-balanced weights")
    p.add_argument("--epochs", type=int, default=25, help="train-fp only")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="vitptq", description="Post-training quantization of a toy ViT with block reconstruction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    defaults = ReconstructionConfig()
    helps = {
        "train-fp": "train the full-precision toy model",
        "calibrate": "calibration-only quantization (no reconstruction)",
        "reconstruct": "calibrate then reconstruct block by block",
        "eval": "top-1 accuracy of a checkpoint",
        "ablate": "run the six loss-component arms plus the full-precision reference",
        "make-data": "write the bundled toy train/test splits to --dataset / --eval-dataset",
    }
    parser.commands = {}
    for name, h in helps.items():
        parser.commands[name] = sp = sub.add_parser(name, help=h, description=h)
        _add_common(sp, defaults)
    return parser


def read_config_file(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required (train-fp, calibrate, reconstruct, eval, ablate, make-data)")
    if args.config is not None:
        sub = parser.commands[args.command]
        file_values = read_config_file(args.config)
        actions = {a.dest: a for a in sub._actions}
        converted = {}
        for key, raw in file_values.items():
            action = actions.get(key)
            if action is None or key in ("config", "help"):
                raise UsageError(f"{args.config}: unknown key {key!r}")
            if isinstance(action, argparse._StoreTrueAction):
                converted[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    converted[key] = action.type(raw) if action.type else raw
                except ValueError:
                    raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from None
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)
    return args


def recon_config(args) -> ReconstructionConfig:
    fixed = args.alpha is not None or args.beta is not None
    if fixed and args.auto_balance:
        raise UsageError("--auto-balance conflicts with --alpha/--beta")
    return ReconstructionConfig(
        iterations=args.iters, lr=args.lr, batch_size=args.batch, calib_size=args.calib_size,
        seed=args.seed, auto_balance=not fixed,
        alpha=args.alpha if args.alpha is not None else 0.0,
        beta=args.beta if args.beta is not None else 0.0,
    )


def _train_split(args) -> Dataset:
    return load_dataset(args.dataset) if args.dataset else toy_datasets(DATA_SEED)[0]


def _eval_split(args, fallback: Optional[Path] = None) -> Dataset:
    path = args.eval_dataset or fallback
    return load_dataset(path) if path else toy_datasets(DATA_SEED)[1]


def _model_in(args):
    return load_checkpoint(args.checkpoint_in or FIXTURE_PATH)


def _calib(args) -> Dataset:
    return sample_calibration(_train_split(args), args.calib_size, args.seed)


def cmd_make_data(args) -> None:
    if not args.dataset or not args.eval_dataset:
        raise UsageError("make-data needs --dataset and --eval-dataset output paths")
    train, test = toy_datasets(DATA_SEED)
    save_dataset(train, args.dataset)
    save_dataset(test, args.eval_dataset)
    print(f"wrote {len(train)} train records to {args.dataset} and {len(test)} test records to {args.eval_dataset}")


def cmd_train_fp(args) -> None:
    train = _train_split(args)
    cfg = ModelConfig(channels=train.images.shape[1], image_size=train.images.shape[2], num_classes=train.num_classes)
    t0 = time.time()
    model = train_toy_fp(train, cfg, seed=args.seed, epochs=args.epochs)
    acc = evaluate_top1(model, _eval_split(args))
    if args.checkpoint_out:
        save_checkpoint(model, args.checkpoint_out)
    print(f"trained {args.epochs} epochs in {time.time() - t0:.1f}s; held-out top-1 {100 * acc:.2f}%")


def cmd_calibrate(args) -> None:
    fp = _model_in(args)
    if fp.mode != FP:
        raise ContractError("calibrate expects a full-precision checkpoint")
    calib = _calib(args)
    q = quantize_model(fp, calib.float_images(), fp.config.with_bits(args.bits_w, args.bits_a))
    if args.checkpoint_out:
        save_checkpoint(q, args.checkpoint_out)
    print(f"calibrated W{args.bits_w}/A{args.bits_a} on {len(calib)} images; "
          f"held-out top-1 {100 * evaluate_top1(q, _eval_split(args)):.2f}%")


def cmd_reconstruct(args) -> None:
    fp = _model_in(args)
    if fp.mode != FP:
        raise ContractError("reconstruct expects a full-precision checkpoint")
    cfg = recon_config(args)
    log = LossLog()
    t0 = time.time()
    q = run_mgrq(fp, _calib(args), cfg, (args.bits_w, args.bits_a), log)
    if args.checkpoint_out:
        save_checkpoint(q, args.checkpoint_out)
    if args.report_out:
        log.write_csv(args.report_out)
    print(f"reconstructed {fp.depth} blocks x {cfg.iterations} iterations in {time.time() - t0:.1f}s")
    for l in range(fp.depth):
        f = log.fused(l)
        if f.size:
            print(f"  block {l}: fused loss {f[0]:.5g} -> {f[-1]:.5g}")
    print(f"held-out top-1 {100 * evaluate_top1(q, _eval_split(args)):.2f}%")


def cmd_eval(args) -> None:
    model = _model_in(args)
    ds = load_dataset(args.dataset) if args.dataset else _eval_split(args)
    print(f"top-1 {100 * evaluate_top1(model, ds):.2f}% on {len(ds)} records ({model.mode})")


def cmd_ablate(args) -> None:
    fp = _model_in(args)
    report = run_ablation(fp, _calib(args), _eval_split(args), recon_config(args), (args.bits_w, args.bits_a))
    if args.report_out:
        report.write_csv(args.report_out)
    print(report.summary())


COMMANDS = {
    "train-fp": cmd_train_fp,
    "calibrate": cmd_calibrate,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "make-data": cmd_make_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
