"""Command line entry point: ``cloudrecon <command> ...``.

Every command writes into a fresh run directory below ``$CLOUDRECON_HOME``
unless an explicit output directory is given, and prints a one-line JSON
summary on stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckptio
from . import config as cfgio
from . import data as dataio
from . import harness, plots
from .config import COV_MODES, LOSSES, ModelConfig, SynthConfig, TrainConfig
from .errors import CloudReconError, ConfigError


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


def _read_or_default(path: str | None, cls):
    return cls() if path is None else cfgio.read(path, cls)


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = _read_or_default(args.model_config, ModelConfig)
    train_cfg = _read_or_default(args.train_config, TrainConfig)
    if args.cov is not None:
        model_cfg = cfgio.replace(model_cfg, cov_mode=args.cov)
    if args.loss is not None:
        train_cfg = cfgio.replace(train_cfg, loss=args.loss)
    if args.no_sar:
        train_cfg = cfgio.replace(train_cfg, use_sar=False)
    synth = dataio.read_synth_config(args.data)
    c_in = synth.c_in if train_cfg.use_sar else synth.k
    if (model_cfg.c_in, model_cfg.k) != (c_in, synth.k):
        raise ConfigError(
            f"model config expects c_in={model_cfg.c_in}, k={model_cfg.k} but {args.data} provides "
            f"c_in={c_in}, k={synth.k}{' without SAR' if not train_cfg.use_sar else ''}"
        )
    return model_cfg, train_cfg


def cmd_synth(args) -> None:
    cfg = _read_or_default(args.config, SynthConfig)
    out = Path(args.out) if args.out else harness.run_dir("synth", cfg)
    dataio.write_dataset(cfg, out)
    counts = {split: len(paths) for split, paths in dataio.read_manifest(out).items()}
    _emit({"dataset": str(out), "scenes": counts})


def cmd_train(args) -> None:
    model_cfg, train_cfg = _configs(args)
    out = Path(args.out) if args.out else None
    result = harness.train(model_cfg, train_cfg, args.data, out)
    last = result.history[-1]
    _emit({"best": result.best, "latest": result.latest, "log": result.log,
           "final_train_loss": last["train_loss"], "final_val_loss": last["val_loss"]})


def _eval_out(args, checkpoint: str) -> Path:
    if args.out:
        return Path(args.out)
    ckpt = ckptio.load(checkpoint)
    return harness.run_dir("eval", ckpt.model_cfg, ckpt.train_cfg)


def cmd_eval(args) -> None:
    out = _eval_out(args, args.checkpoint)
    report = harness.evaluate(args.checkpoint, args.data, args.split, args.t_override, out, plots=not args.no_plots)
    _emit({"eval_dir": out, **report.summary()})


def cmd_ensemble_train(args) -> None:
    model_cfg, train_cfg = _configs(args)
    paths = harness.train_ensemble(model_cfg, train_cfg, args.data, args.members, args.out)
    _emit({"checkpoints": [str(p) for p in paths]})


def cmd_ensemble_eval(args) -> None:
    out = _eval_out(args, args.checkpoints[0])
    report = harness.evaluate_ensemble(args.checkpoints, args.data, args.split, args.t_override, out,
                                       plots=not args.no_plots)
    _emit({"eval_dir": out, **report.summary()})


def cmd_report(args) -> None:
    eval_dir = Path(args.eval_dir)
    if not (eval_dir / "metrics.csv").exists():
        raise ConfigError(f"{eval_dir} is not an evaluation directory (metrics.csv missing)")
    written = plots.render_eval_dir(eval_dir)
    _emit({"eval_dir": eval_dir, "figures": [str(p) for p in written]})


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model-config", help="INI file with a [model] section (defaults if omitted)")
    p.add_argument("--train-config", help="INI file with a [train] section (defaults if omitted)")
    p.add_argument("--data", required=True, help="dataset directory written by 'synth'")
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--cov", choices=COV_MODES)
    p.add_argument("--no-sar", action="store_true", help="drop the SAR channels (model c_in must equal k)")
    p.add_argument("--out", help="output directory (default: a fresh run directory)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--t-override", type=int, default=None, help="use only the first N dates")
    p.add_argument("--out", help="output directory (default: a fresh run directory)")
    p.add_argument("--no-plots", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudrecon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="INI file with a [synth] section (defaults if omitted)")
    p.add_argument("--out", help="dataset directory (default: a fresh run directory)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble-train", help="train a deep ensemble")
    p.add_argument("--members", type=int, default=5)
    _add_training_flags(p)
    p.set_defaults(func=cmd_ensemble_train)

    p = sub.add_parser("ensemble-eval", help="evaluate a deep ensemble")
    p.add_argument("--checkpoints", nargs="+", required=True)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("report", help="render figures for an evaluation directory")
    p.add_argument("--eval-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CloudReconError as exc:
        print(f"cloudrecon {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
