"""Command line: ``evsev dataset | train | eval``.

Every command reads an optional flat ``key = value`` config file (``#`` starts
a comment), then applies ``EVSEV_SEED`` and finally command-line flags.
Paths are relative to ``--out``. Exit codes: 0 ok, 2 config or I/O error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, metrics
from . import model as M
from .labeling import LabelConfig
from .netpbm import NetpbmError, read_ppm
from .nncore import DegenerateLossError

log = logging.getLogger("evsev")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SELECTIVE_GRID = (1.0, 0.8, 0.6, 0.5, 0.3, 0.2)
HISTORY_FIELDS = ("epoch", "edl", "kl", "aod", "total", "lr")


class ConfigError(ValueError):
    pass


def check_forward_count(counted: int, n_patches: int) -> int:
    """Evaluation must run exactly one forward pass per patch."""
    if counted != n_patches:
        raise RuntimeError(f"{counted} forward passes for {n_patches} patches")
    return counted


@dataclass
class RunConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    n: int = 600
    seed: int = 0
    proportions: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    labels: str = "oracle"
    ingest: str = ""
    fractions: tuple[float, ...] = (0.53, 0.09, 0.38)
    dataset: str = "dataset"
    checkpoint: str = "train/checkpoint.bin"
    eval_split: str = "test"
    n_bins: int = 15
    selective: tuple[float, ...] = ()
    degrade: bool = False
    bootstrap: int = 0
    map: bool = False
    map_image: str = ""
    window: int = 32
    stride: int = 16

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if isinstance(current, tuple):
            items = [s for s in raw.replace(" ", "").split(",") if s]
            cast = type(current[0]) if current else float
            return tuple(cast(s) for s in items)
        return type(current)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def apply_setting(cfg: RunConfig, key: str, raw: str) -> None:
    key = key.strip().replace("-", "_")
    mnames = {f.name for f in fields(M.ModelConfig)}
    rnames = {f.name for f in fields(RunConfig)} - {"model"}
    if key in rnames:
        setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
    elif key in mnames:
        setattr(cfg.model, key, _coerce(key, raw, getattr(cfg.model, key)))
    else:
        raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        try:
            apply_setting(cfg, k, v.strip())
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e.strerror}") from None
        parse_config_text(text, cfg, args.config)
    env = os.environ.get("EVSEV_SEED")
    if env is not None:
        apply_setting(cfg, "seed", env)
    for key in ("n", "seed", "labels", "ingest", "epochs", "lr", "batch_size", "dataset", "checkpoint",
                "eval_split", "selective", "window", "stride", "bootstrap", "map_image", "proportions"):
        v = getattr(args, key, None)
        if v is not None:
            apply_setting(cfg, key, str(v))
    for key in ("degrade", "map"):
        if getattr(args, key, False):
            setattr(cfg, key, True)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_setting(cfg, *item.split("=", 1))
    cfg.model.seed = cfg.seed
    try:
        cfg.model.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.labels not in ("oracle", "pipeline"):
        raise ConfigError(f"labels must be oracle or pipeline, got {cfg.labels!r}")
    return cfg


def _write_echo(path: Path, cfg: RunConfig, command: str) -> None:
    with open(path, "w") as fh:
        json.dump({"command": command, "config": cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands

def cmd_dataset(cfg: RunConfig, out: Path) -> int:
    root = out / cfg.dataset
    if cfg.ingest:
        src = Path(cfg.ingest)
        if not src.is_dir():
            raise ConfigError(f"ingest directory {src} does not exist")
        examples = data.ingest_directory(src, LabelConfig())
        if not examples:
            raise ConfigError(f"no .ppm files in {src}")
    else:
        examples = data.synthesize_dataset(cfg.n, cfg.proportions, seed=cfg.seed, label_mode=cfg.labels)
    rows = data.write_dataset(root, examples, cfg.fractions, cfg.seed)
    _write_echo(root / "config.json", cfg, "dataset")
    counts = np.bincount([r.cls for r in rows], minlength=3)
    log.info("wrote %d patches to %s (classes %s)", len(rows), root, counts.tolist())
    return EXIT_OK


def _arrays(examples):
    x = np.stack([e.patch for e in examples])
    y = np.array([e.cls for e in examples], dtype=int)
    a = np.array([e.pseudo_aod for e in examples], dtype=np.float64)
    return x, y, a


def cmd_train(cfg: RunConfig, out: Path) -> int:
    root = out / cfg.dataset
    if not (root / "manifest.csv").exists():
        raise ConfigError(f"no dataset at {root}; run the dataset command first")
    train_set = data.load_dataset(root, "train")
    if not train_set:
        raise ConfigError(f"{root} has no train split")
    ck = out / cfg.checkpoint
    ck.parent.mkdir(parents=True, exist_ok=True)
    params, history = M.train(*_arrays(train_set), cfg.model)
    echo = {"run": cfg.to_dict(), "n_train": len(train_set)}
    M.save_checkpoint(ck, params, cfg.model, echo)
    with open(ck.parent / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    _write_echo(ck.parent / "config.json", cfg, "train")
    log.info("trained %d epochs on %d patches -> %s", cfg.model.epochs, len(train_set), ck)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    params, mcfg, _ = M.load_checkpoint(out / cfg.checkpoint)
    root = out / cfg.dataset
    examples = data.load_dataset(root, cfg.eval_split)
    if not examples:
        raise ConfigError(f"split {cfg.eval_split!r} of {root} is empty")
    patches = [e.patch for e in examples]
    labels = [e.cls for e in examples]

    M.FORWARD_COUNTER.reset()
    outs = M.predict_batch(patches, params, mcfg)
    passes = check_forward_count(M.FORWARD_COUNTER.count, len(patches))

    records = metrics.make_records(labels, outs)
    report = metrics.evaluate(records, cfg.n_bins, cfg.selective)
    report.forward_passes = passes
    report.config = {"run": cfg.to_dict(), "model": mcfg.to_dict(), "n_eval": len(examples)}
    if cfg.bootstrap:
        report.bootstrap = {}
        names = ["accuracy", "weighted_accuracy", "ece"] + [f"recall:{k}" for k in range(mcfg.num_classes)]
        for name in names:
            try:
                report.bootstrap[name] = metrics.bootstrap_ci(records, name, cfg.bootstrap, seed=cfg.seed)
            except metrics.BootstrapError as e:
                log.warning("%s", e)
    if cfg.degrade:
        report.degradation = metrics.degradation_report(patches, labels, params, mcfg, seed=cfg.seed)
    dest = out / "eval"
    report.write(dest, records)
    if cfg.map:
        (dest / "maps").mkdir(exist_ok=True)
        image = data.make_patch(read_ppm(cfg.map_image)) if cfg.map_image else patches[0]
        umap = metrics.uncertainty_map(image, params, mcfg, cfg.window, cfg.stride)
        metrics.write_uncertainty_map(dest / "maps" / "map", umap)
    acc = report.classification["accuracy"]
    log.info("evaluated %d patches: accuracy %.4f, ECE %.4f", len(examples), acc, report.ece)
    return EXIT_OK


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evsev", description="Evidential smoke severity pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", default=".", help="run directory; all paths are relative to it")
        p.add_argument("--seed", type=int)
        p.add_argument("--dataset", help="dataset directory under --out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("dataset", help="synthesize or ingest patches and write manifest and splits")
    common(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--synth", action="store_true", help="generate synthetic scenes (default)")
    g.add_argument("--ingest", metavar="DIR", help="label every .ppm in DIR with the pseudo-AOD pipeline")
    p.add_argument("--n", type=int)
    p.add_argument("--labels", choices=("oracle", "pipeline"))
    p.add_argument("--proportions", help="class proportions, e.g. 0.558,0.066,0.375")

    p = sub.add_parser("train", help="train on the train split")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write the report")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--eval-split", choices=data.SPLITS)
    p.add_argument("--selective", nargs="?", const=",".join(map(str, SELECTIVE_GRID)),
                   help="retain fractions (default grid 1.0 ... 0.2)")
    p.add_argument("--degrade", action="store_true", help="add the six-condition degradation table")
    p.add_argument("--bootstrap", type=int, metavar="ITERS")
    p.add_argument("--map", action="store_true", help="emit a sliding-window uncertainty map")
    p.add_argument("--map-image", help="PPM to map (default: first evaluated patch)")
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (M.TrainingDiverged, DegenerateLossError, FloatingPointError) as e:
        print(f"evsev {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, OSError, NetpbmError, M.CheckpointError, ValueError) as e:
        print(f"evsev {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
