"""Command-line interface: ``train``, ``eval``, ``check`` and ``gen``.

Settings resolve in three layers, later ones winning: built-in defaults, a
``key = value`` config file (``--config``), then command-line flags. Every
command prints the resolved settings as ``# key = value`` lines first.

Exit codes: 0 success, 1 property or metric failure, 2 configuration error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ndcore
from .exceptions import ConfigError, FormatError, InsufficientPointsError, ResourceError, VersionError
from .graph import PointCloud
from .io import XYZ_SUFFIXES, PLY_SUFFIXES, ingest, write_cloud
from .pipeline import BlockConfig, SegmentationModel, evaluate, fit, gen_dataset
from .pipeline.checkpoint import load_checkpoint, model_meta, save_checkpoint
from .pipeline.synthetic import NUM_CLASSES

logger = logging.getLogger("nodecorr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

DEFAULTS: Dict[str, object] = {
    "data": "synthetic",
    "n_scenes": 50,
    "n_points": 512,
    "difficulty": 0.5,
    "data_seed": 0,
    "num_classes": 0,  # 0: synthetic class count, or inferred from labels
    "channels": 32,
    "k": 8,
    "dilation": 2,
    "reduction": 8,
    "variant": "full",
    "nonlocal_cap": 8192,
    "steps": 2000,
    "lr": 1e-3,
    "seed": 0,
    "dtype": "float64",
    "out": "model.ckpt",
    "log": "train_loss.log",
    "checkpoint": "model.ckpt",
    "metrics": "metrics.json",
    "format": "xyz",
    "scale": 1.0,
    "mutate": "",
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items()}
# per-command defaults that differ from the shared table
COMMAND_DEFAULTS: Dict[str, Dict[str, object]] = {"gen": {"out": "scenes"}}

COMMAND_KEYS = {
    "train": ["data", "n_scenes", "n_points", "difficulty", "data_seed", "num_classes", "channels",
              "k", "dilation", "reduction", "variant", "nonlocal_cap", "steps", "lr", "seed",
              "dtype", "out", "log"],
    "eval": ["data", "n_scenes", "n_points", "difficulty", "data_seed", "checkpoint", "metrics"],
    "check": ["seed", "scale", "mutate"],
    "gen": ["n_scenes", "n_points", "difficulty", "data_seed", "out", "format"],
}


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def read_config_file(path: str) -> Dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", EXIT_IO) from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'", EXIT_CONFIG)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key: str, value) -> object:
    if key not in _TYPES:
        raise CliError(f"unknown setting {key!r}", EXIT_CONFIG)
    kind = _TYPES[key]
    try:
        if kind is int:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return kind(value)
    except (TypeError, ValueError):
        raise CliError(f"setting {key}={value!r} is not a valid {kind.__name__}", EXIT_CONFIG) from None


def resolve(command: str, file_values: Dict[str, str], flags: Dict[str, object]) -> Dict[str, object]:
    cfg = {k: COMMAND_DEFAULTS.get(command, {}).get(k, DEFAULTS[k]) for k in COMMAND_KEYS[command]}
    for layer in (file_values, flags):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in cfg:
                if key in DEFAULTS:
                    continue  # setting for another command; harmless
                raise CliError(f"unknown setting {key!r}", EXIT_CONFIG)
            cfg[key] = _coerce(key, value)
    return cfg


def echo_config(cfg: Dict[str, object], stream=None) -> None:
    stream = stream or sys.stdout
    for key in sorted(cfg):
        stream.write(f"# {key} = {cfg[key]}\n")
    stream.flush()


def load_clouds(cfg: Dict[str, object]) -> List[PointCloud]:
    data = str(cfg["data"])
    if data == "synthetic":
        if int(cfg["n_scenes"]) < 1:
            raise CliError("n_scenes must be >= 1", EXIT_CONFIG)
        try:
            return gen_dataset(int(cfg["data_seed"]), int(cfg["n_scenes"]), int(cfg["n_points"]),
                               float(cfg["difficulty"]))
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
    path = Path(data)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in XYZ_SUFFIXES | PLY_SUFFIXES)
    elif path.exists():
        files = [path]
    else:
        raise CliError(f"data path {data!r} does not exist", EXIT_IO)
    if not files:
        raise CliError(f"no point-cloud files under {data!r}", EXIT_IO)
    try:
        return [ingest(f) for f in files]
    except (OSError, FormatError) as exc:
        raise CliError(f"cannot read data: {exc}", EXIT_IO) from None


def _num_classes(cfg, clouds) -> int:
    n = int(cfg["num_classes"])
    if n:
        return n
    if str(cfg["data"]) == "synthetic":
        return NUM_CLASSES
    labels = [c.labels.max() for c in clouds if c.labels is not None and c.labels.size]
    if not labels:
        raise CliError("training data has no labels", EXIT_CONFIG)
    return int(max(labels)) + 1


def cmd_train(cfg: Dict[str, object], out=None) -> int:
    out = out or sys.stdout
    try:
        block = BlockConfig(int(cfg["channels"]), int(cfg["k"]), int(cfg["dilation"]),
                            int(cfg["reduction"]), str(cfg["variant"]), int(cfg["nonlocal_cap"]))
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    if cfg["dtype"] not in ("float64", "float32"):
        raise CliError("dtype must be float64 or float32", EXIT_CONFIG)
    if int(cfg["steps"]) < 0 or float(cfg["lr"]) < 0:
        raise CliError("steps and lr must be non-negative", EXIT_CONFIG)
    clouds = load_clouds(cfg)
    for j, c in enumerate(clouds):
        try:
            block.check_cloud_size(c.n_points)
        except (InsufficientPointsError, ResourceError) as exc:
            raise CliError(f"cloud {j}: {exc}", EXIT_CONFIG) from None
        if c.labels is None:
            raise CliError(f"cloud {j} has no labels", EXIT_CONFIG)
    in_dims = {3 + c.n_extras for c in clouds}
    if len(in_dims) != 1:
        raise CliError("clouds disagree on their extra feature channels", EXIT_CONFIG)
    num_classes = _num_classes(cfg, clouds)
    if max(int(c.labels.max()) for c in clouds) >= num_classes:
        raise CliError(f"labels exceed num_classes={num_classes}", EXIT_CONFIG)

    model = SegmentationModel(block, in_dims.pop(), num_classes, seed=int(cfg["seed"]),
                              dtype=np.dtype(str(cfg["dtype"])))
    try:
        log_fh = open(cfg["log"], "w", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write loss log: {exc}", EXIT_IO) from None
    with log_fh:
        def record(step, loss, elapsed):
            log_fh.write(f"{step} {loss:.17g} {elapsed:.6f}\n")

        log = fit(model, clouds, int(cfg["steps"]), float(cfg["lr"]), int(cfg["seed"]), record)
    try:
        save_checkpoint(model, str(cfg["out"]))
    except OSError as exc:
        raise CliError(f"cannot write checkpoint: {exc}", EXIT_IO) from None
    final = log.losses[-1] if log.losses else float("nan")
    out.write(f"steps {len(log.losses)} final_loss {final:.17g} params {model.n_params()}\n")
    return EXIT_OK


def cmd_eval(cfg: Dict[str, object], out=None) -> int:
    out = out or sys.stdout
    try:
        model = load_checkpoint(str(cfg["checkpoint"]))
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
    except VersionError as exc:
        raise CliError(f"checkpoint rejected: {exc}", EXIT_CONFIG) from None
    clouds = load_clouds(cfg)
    if not clouds:
        raise CliError("no clouds to evaluate", EXIT_CONFIG)
    for j, c in enumerate(clouds):
        if c.labels is None:
            raise CliError(f"cloud {j} has no labels", EXIT_CONFIG)
        if 3 + c.n_extras != model.in_dim:
            raise CliError(f"cloud {j} has {3 + c.n_extras} features, checkpoint expects "
                           f"{model.in_dim}", EXIT_CONFIG)
        try:
            model.config.check_cloud_size(c.n_points)
        except (InsufficientPointsError, ResourceError) as exc:
            raise CliError(f"cloud {j}: {exc}", EXIT_CONFIG) from None
        if int(c.labels.max()) >= model.num_classes:
            raise CliError(f"cloud {j} has labels beyond the model's {model.num_classes} classes",
                           EXIT_CONFIG)
    scores = evaluate(clouds, model, per_cloud=True)
    for key in ("OA", "mAcc", "mIoU"):
        out.write(f"{key} {scores[key]:.4f}\n")
    report = {"model": model_meta(model), **scores}
    try:
        Path(str(cfg["metrics"])).write_text(json.dumps(report, indent=2), encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write metrics: {exc}", EXIT_IO) from None
    return EXIT_OK


def cmd_check(cfg: Dict[str, object], out=None) -> int:
    from .verify import format_report, mutation, run_suite

    out = out or sys.stdout
    name = str(cfg["mutate"])
    if name and name not in ndcore.KNOWN_MUTATIONS:
        raise CliError(f"unknown mutation {name!r}; known: {', '.join(ndcore.KNOWN_MUTATIONS)}",
                       EXIT_CONFIG)
    if float(cfg["scale"]) <= 0:
        raise CliError("scale must be positive", EXIT_CONFIG)
    if name:
        with mutation(name):
            results = run_suite(int(cfg["seed"]), float(cfg["scale"]))
    else:
        results = run_suite(int(cfg["seed"]), float(cfg["scale"]))
    out.write(format_report(results) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_gen(cfg: Dict[str, object], out=None) -> int:
    out = out or sys.stdout
    fmt = str(cfg["format"])
    if fmt not in ("xyz", "ply"):
        raise CliError("format must be xyz or ply", EXIT_CONFIG)
    cfg = dict(cfg, data="synthetic")
    clouds = load_clouds(cfg)
    target = Path(str(cfg["out"]))
    try:
        target.mkdir(parents=True, exist_ok=True)
        for j, cloud in enumerate(clouds):
            write_cloud(cloud, target / f"scene_{j:04d}.{fmt}")
    except OSError as exc:
        raise CliError(f"cannot write scenes: {exc}", EXIT_IO) from None
    for j, cloud in enumerate(clouds):
        hist = np.bincount(cloud.labels, minlength=NUM_CLASSES)
        out.write(f"scene_{j:04d} points {cloud.n_points} classes {' '.join(map(str, hist))}\n")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "check": cmd_check, "gen": cmd_gen}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodecorr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        for key in keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           help=f"default: {COMMAND_DEFAULTS.get(name, {}).get(key, DEFAULTS[key])!r}")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
        echo_config(cfg)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
