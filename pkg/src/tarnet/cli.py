"""Command-line interface: ``tarnet <synth|train|transfer|eval|cam|inspect>``.

Every command accepts ``--config file.json``; keys are the long flag names
with dashes replaced by underscores, and any flag given on the command line
overrides the file. ``TAR_SEED`` supplies the default seed.

Exit codes: 0 success, 2 configuration error, 3 data/format/IO error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
import time
import zlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FAKE_KINDS, SplitSpec, load_dataset, save_dataset, synthesize
from .errors import ConfigError, ContractError, FormatError, NumericError
from .evaluate import cam_map, evaluate, overlay, transfer_table, write_report, zero_shot_matrix
from .model import PRESETS, ArchConfig, build_model, summary
from .ppm import load_ppm, save_ppm
from .train import HISTORY_FIELDS, TrainConfig, TransferPlan, _fit, sequence_transfer

log = logging.getLogger("tarnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def default_seed() -> int:
    raw = os.environ.get("TAR_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"TAR_SEED must be an integer, got {raw!r}") from None


@contextlib.contextmanager
def thread_limit(threads: int | None):
    if threads is None:
        yield
        return
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    wall_time_s: float = 0.0
    outputs: list[str] = dataclasses.field(default_factory=list)

    def write(self, path: Path) -> None:
        write_json_atomic(path, dataclasses.asdict(self))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _arch(args) -> ArchConfig:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[args.preset]()


def _train_config(args, **overrides) -> TrainConfig:
    fields = {
        "lr": args.lr,
        "optimizer": args.optimizer,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "seed": args.seed,
        "lam": args.lam,
        "lr_mult": getattr(args, "lr_mult", 1.0),
        "activation_source": args.activation_source,
        "lr_schedule": args.lr_schedule,
        "flip": args.flip,
    }
    fields.update(overrides)
    return TrainConfig(**fields)


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec.epoch] + [repr(float(getattr(rec, f))) for f in HISTORY_FIELDS[1:]])


def _domains(arg: str, known: list[str]) -> list[str]:
    if arg == "all":
        return list(known)
    names = [d.strip() for d in arg.split(",") if d.strip()]
    bad = [d for d in names if d not in known]
    if bad or not names:
        raise ConfigError(f"unknown domain(s) {bad or arg!r}; known domains: {', '.join(known)}")
    return names


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> list[Path]:
    spec = SplitSpec(args.base, args.fewshot, args.test, tuple(_domains(args.domains, list(FAKE_KINDS))))
    S = _arch(args).input_size if args.size is None else args.size
    if S < 16 or S % 16:
        raise ConfigError(f"image size must be a positive multiple of 16, got {S}")
    ds = synthesize(spec, S, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = save_dataset(ds, out)
    digest = zlib.crc32(manifest.read_bytes())
    print(f"{manifest} (crc32 {digest:08x})")
    return [manifest]


def cmd_train(args) -> list[Path]:
    ds = load_dataset(args.data)
    domain = _domains(args.domain, ds.domains)[0]
    samples = ds.get(domain, "base")
    if not samples:
        raise ConfigError(f"domain {domain!r} has no base split")
    model = build_model(_arch(args), args.seed)
    if model.config.input_size != samples[0].pixels.shape[-1]:
        raise ConfigError(
            f"dataset images are {samples[0].pixels.shape[-1]} px but preset {args.preset!r} expects {model.config.input_size}"
        )
    cfg = _train_config(args)
    if cfg.epochs < 1:
        raise ConfigError("train needs --epochs >= 1")
    trained, history, opt = _fit(model, samples, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.tarc"
    save_checkpoint(ckpt, trained, opt)
    hist = out / "history.csv"
    _write_history(hist, history)
    print(f"{ckpt}\n{hist}")
    return [ckpt, hist]


def cmd_transfer(args) -> list[Path]:
    ck = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    seq = _domains(args.seq, ds.domains)
    cfg = _train_config(args)
    plan = TransferPlan(args.source or "base", seq, args.shots, cfg, lr_decay=args.stage_decay)
    fewshot = {d: ds.get(d, "fewshot") for d in seq}
    tests = {d: ds.get(d, "test") for d in ds.domains}
    _, snaps = sequence_transfer(ck.model, plan, fewshot, tests, keep_models=True)
    out = Path(args.out)
    (out / "table").mkdir(parents=True, exist_ok=True)
    paths = []
    for i, snap in enumerate(snaps, 1):
        p = out / f"stage{i}_{snap.domain}.tarc"
        save_checkpoint(p, snap.model)
        paths.append(p)
    baseline = None
    if args.baseline:
        baseline = {d: evaluate(ck.model, s).accuracy for d, s in tests.items()}
    paths += write_report(transfer_table(snaps, baseline), out / "table", "transfer")
    print(Path(paths[-1]).read_text(), end="")
    return paths


def cmd_eval(args) -> list[Path]:
    ck = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    names = _domains(args.domains, ds.domains)
    tests = {d: ds.get(d, "test") for d in names}
    base = args.base_domain or names[0]
    if base not in tests:
        raise ConfigError(f"base domain {base!r} is not among evaluated domains {names}")
    matrix = zero_shot_matrix(ck.model, tests, base, Path(args.checkpoint).stem, args.brightness, args.contrast)
    paths = list(write_report(matrix, Path(args.out) / "table", "report"))
    print(paths[1].read_text(), end="")
    return paths


def cmd_cam(args) -> list[Path]:
    ck = load_checkpoint(args.checkpoint)
    img = load_ppm(args.image, np.float32)
    heat = cam_map(ck.model, img, args.layer)
    out = Path(args.out) / "cam"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    heat_path = out / f"{stem}_heatmap.ppm"
    over_path = out / f"{stem}_overlay.ppm"
    save_ppm(np.repeat(heat.values[None] * 2 - 1, 3, axis=0), heat_path)
    save_ppm(overlay(img, heat, args.alpha), over_path)
    print(f"{heat_path}\n{over_path}")
    return [heat_path, over_path]


def cmd_inspect(args) -> list[Path]:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.model.config
    print(f"checkpoint: {args.checkpoint}")
    print("crc32: ok")
    print(f"architecture: {json.dumps(cfg.to_dict(), sort_keys=True)}")
    print(summary(cfg))
    n = ck.model.params.num_elements()
    print(f"parameters: {len(ck.model.params.names())} tensors, {n} values")
    print(f"batch-norm layers: {len(ck.model.bn)}")
    if ck.optimizer is not None:
        print(f"optimizer: {ck.optimizer.config.kind}, {ck.optimizer.step_count} steps")
    return []


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "inspect": cmd_inspect,
}


def _add_common(p: argparse.ArgumentParser, seed_default: int) -> None:
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 = deterministic path)")
    p.add_argument("--preset", default="desk", help="architecture preset: desk, micro or reference")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(
    p: argparse.ArgumentParser, epochs: int, batch_size: int, lr: float, lr_schedule: str, flip: bool
) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--lam", type=float, default=0.1, help="reconstruction loss weight")
    p.add_argument("--activation-source", default="raw", choices=("raw", "facilitated"))
    p.add_argument("--lr-schedule", default=lr_schedule, choices=("constant", "cosine"))
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=flip, help="random left-right mirroring")


DESK_TRAIN = {"epochs": 20, "batch_size": 32, "lr": 2e-3, "lr_schedule": "cosine", "flip": True}
DESK_TRANSFER = {"epochs": 50, "batch_size": 10, "lr": 1e-3, "lr_schedule": "constant", "flip": True}


def build_parser(seed_default: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tarnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tarnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-domain dataset")
    _add_common(p, seed_default)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=None, help="image side; defaults to the preset's")
    p.add_argument("--base", type=int, default=1000, help="per-class base-split count per domain")
    p.add_argument("--fewshot", type=int, default=50)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--domains", default="all")

    p = sub.add_parser("train", help="train a model on one domain's base split")
    _add_common(p, seed_default)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    _add_training(p, **DESK_TRAIN)

    p = sub.add_parser("transfer", help="sequential few-shot transfer")
    _add_common(p, seed_default)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seq", required=True, help="comma-separated target domains, in order")
    p.add_argument("--shots", type=int, default=50)
    p.add_argument("--source", default=None, help="label for the source domain in stage names")
    p.add_argument("--lr-mult", type=float, default=1.0)
    p.add_argument("--stage-decay", type=float, default=0.1, help="learning-rate factor applied per later stage")
    p.add_argument("--baseline", action="store_true", help="report row-0 deltas against the input model")
    p.add_argument("--out", required=True)
    _add_training(p, **DESK_TRANSFER)

    p = sub.add_parser("eval", help="accuracy matrix over test splits")
    _add_common(p, seed_default)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domains", default="all")
    p.add_argument("--base-domain", default=None)
    p.add_argument("--brightness", type=float, default=0.0)
    p.add_argument("--contrast", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cam", help="activation heatmap and overlay for one image")
    _add_common(p, seed_default)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect", help="print a checkpoint summary and verify its CRC")
    _add_common(p, seed_default)
    p.add_argument("--checkpoint", required=True)
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser(default_seed())
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise FormatError(f"cannot read config {args.config}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {args.config} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {args.config} must hold a JSON object")
    unknown = sorted(set(cfg) - set(vars(args)) | ({"command", "config"} & set(cfg)))
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command!r}: {unknown}")
    # re-parse with file values as defaults so explicit flags still win
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def run(argv: list[str]) -> int:
    started, t0 = _now(), time.perf_counter()
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    with thread_limit(args.threads):
        outputs = COMMANDS[args.command](args)
    out = getattr(args, "out", None)
    if out is not None:
        config = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "verbose")}
        RunManifest(
            args.command, config, args.seed, started=started, finished=_now(),
            wall_time_s=round(time.perf_counter() - t0, 3), outputs=[str(p) for p in outputs],
        ).write(Path(out) / f"run_{args.command}.json")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except (ConfigError, ContractError) as e:
        print(f"tarnet: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"tarnet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"tarnet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
