"""Command-line entry point: prepare, train, declip, evaluate, noise-sweep, spectrogram.

Settings come from an optional JSON ``--config`` file; explicit flags win.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace

from .harness.dataset import TEST_GRID, TRAIN_GRID, DataError, DatasetManifest, prepare_dataset
from .harness.experiment import (
    DEFAULT_NOISE_GRID,
    METHODS,
    PartialFailure,
    evaluate_run,
    export_spectrogram,
    noise_sweep,
    run_declip,
    train_command,
)
from .nn.checkpoint import CheckpointError
from .nn.training import TrainConfig
from .nn.unet import UNetConfig
from .sparse import SparseSolverConfig
from .wavio import UnsupportedWavError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3
DESK_UNET = {"depth": 4, "base_filters": 8, "image_size": 64}

log = logging.getLogger("declipper")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {exc}")


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="declipper", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="write clean and clipped WAVs plus a manifest")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--corpus", help="directory of mono 16-bit WAVs (speaker = subdirectory)")
    src.add_argument("--synthetic", type=int, help="generate N synthetic utterances instead")
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float, help="synthetic utterance length in seconds")
    s.add_argument("--train-grid", type=_floats)
    s.add_argument("--test-grid", type=_floats)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train the U-Net on the manifest's train split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--image-size", type=int)
    s.add_argument("--base-filters", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("declip", help="run one declipping method on a split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test")

    s = sub.add_parser("evaluate", help="score processed files and write tables")
    s.add_argument("--manifest", required=True)
    s.add_argument("--processed", required=True, help="directory given to declip --out")
    s.add_argument("--methods", type=_names)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")

    s = sub.add_parser("noise-sweep", help="noisy clipped input at 3.5 dB, per noise variance")
    s.add_argument("--manifest", required=True)
    s.add_argument("--methods", type=_names)
    s.add_argument("--sigma2", type=_floats)
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("spectrogram", help="export a log-magnitude spectrogram")
    s.add_argument("wav")
    s.add_argument("out")
    s.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    return p


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    return flag if flag is not None else cfg.get(key, default)


def _dataclass_from(cls, values: dict, base=None):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _methods(args, cfg) -> list[str]:
    methods = _pick(args.methods, cfg, "methods", ["passthrough", "iht", "consistent_iht"])
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown methods {bad}; expected a subset of {METHODS}")
    return methods


def _solver(cfg) -> SparseSolverConfig:
    return _dataclass_from(SparseSolverConfig, cfg.get("solver", {}))


def _checkpoint(args, cfg):
    return _pick(args.checkpoint, cfg, "checkpoint", None)


def cmd_prepare(args, cfg) -> int:
    corpus = _pick(args.corpus, cfg, "corpus", None)
    synthetic = _pick(args.synthetic, cfg, "synthetic", None)
    if args.corpus is not None:
        synthetic = None
    elif args.synthetic is not None:
        corpus = None
    if (corpus is None) == (synthetic is None):
        raise ConfigError("give exactly one of --corpus and --synthetic")
    m = prepare_dataset(
        args.out, corpus_dir=corpus, synthetic=synthetic,
        train_grid=_pick(args.train_grid, cfg, "train_grid", TRAIN_GRID),
        test_grid=_pick(args.test_grid, cfg, "test_grid", TEST_GRID),
        seed=_pick(args.seed, cfg, "seed", 0),
        duration=_pick(args.duration, cfg, "duration", 2.0),
    )
    print(f"{len(m.entries)} clipped files, manifest at {args.out}/manifest.json")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    unet = dict(DESK_UNET, **cfg.get("unet", {}))
    for key, flag in (("image_size", args.image_size), ("base_filters", args.base_filters),
                      ("depth", args.depth)):
        if flag is not None:
            unet[key] = flag
    unet_cfg = _dataclass_from(UNetConfig, unet)
    train = dict(cfg.get("train", {}))
    for key, flag in (("epochs", args.epochs), ("batch_size", args.batch_size),
                      ("learning_rate", args.lr), ("seed", args.seed)):
        if flag is not None:
            train[key] = flag
    train_cfg = _dataclass_from(TrainConfig, train)
    manifest = DatasetManifest.load(args.manifest)
    _, losses = train_command(manifest, unet_cfg, train_cfg, args.out,
                              model_seed=train_cfg.seed)
    print(f"{len(losses)} epochs, loss {losses[0]:.6g} -> {losses[-1]:.6g}; "
          f"checkpoint at {args.out}/model.ckpt")
    return EXIT_OK


def cmd_declip(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest)
    run = run_declip(manifest, args.method, args.out, split=args.split,
                     checkpoint=_checkpoint(args, cfg), solver=_solver(cfg))
    print(f"{args.method}: {len(run.outputs)} files written, {len(run.failures)} failed")
    for path, msg in run.failures.items():
        print(f"  FAILED {path}: {msg}", file=sys.stderr)
    return EXIT_OK if run.ok else EXIT_PARTIAL


def cmd_evaluate(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest)
    try:
        _, tables = evaluate_run(manifest, args.processed, _methods(args, cfg), args.out,
                                 split=args.split)
        status = EXIT_OK
    except PartialFailure as exc:
        print(f"partial results: {exc}", file=sys.stderr)
        tables, status = exc.tables, EXIT_PARTIAL
    for table in tables.values():
        print(table.to_text())
    return status


def cmd_noise_sweep(args, cfg) -> int:
    manifest = DatasetManifest.load(args.manifest)
    sigma2 = _pick(args.sigma2, cfg, "noise_grid", list(DEFAULT_NOISE_GRID))
    _, tables = noise_sweep(manifest, _methods(args, cfg), sigma2, args.out, split=args.split,
                            checkpoint=_checkpoint(args, cfg), solver=_solver(cfg),
                            seed=_pick(args.seed, cfg, "seed", 0))
    for table in tables.values():
        print(table.to_text())
    return EXIT_OK


def cmd_spectrogram(args, cfg) -> int:
    logmag = export_spectrogram(args.wav, args.out, args.format)
    print(f"{logmag.shape[0]} frames x {logmag.shape[1]} bins written to {args.out}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "declip": cmd_declip,
    "evaluate": cmd_evaluate, "noise-sweep": cmd_noise_sweep, "spectrogram": cmd_spectrogram,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, load_config(args.config))
    except (DataError, CheckpointError, UnsupportedWavError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # includes ConfigError
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
