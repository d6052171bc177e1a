"""``aniso-sr`` command line: train, superres, evaluate, metrics.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from . import __version__
from .autodiff.serialize import IncompatibleWeightsError, WeightFormatError, load_weights, save_weights
from .autoencoder import Autoencoder, superresolve_volume
from .harness import METHODS, evaluate_volumes, export_report, summarize
from .metrics import psnr, ssim, vif
from .trainer import NumericalAbort, TrainConfig, TrainConfigError, train
from .volume_io import (DegenerateInputError, Volume, VolumeFormatError, VolumeShapeError,
                        center_crop, load_volume, percentile_normalize, resample_inplane,
                        write_volume)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FORMAT_CHOICES = {"nifti1": "nifti1", "raw": "raw_sidecar"}
VOLUME_SUFFIXES = (".nii", ".json")

log = logging.getLogger("aniso_sr")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _threads(arg: int | None) -> int:
    if arg is not None:
        value = arg
    else:
        raw = os.environ.get("ANISO_SR_THREADS", "1")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"ANISO_SR_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _volume_files(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory {directory} does not exist")
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in VOLUME_SUFFIXES)
    if not files:
        raise DataError(f"no volumes (.nii or .json sidecar) found in {directory}")
    return files


def preprocess(v: Volume) -> Volume:
    return resample_inplane(percentile_normalize(v))


def _crop16(v: Volume, size: int = 128) -> Volume:
    rows = min(size, v.shape[1] - v.shape[1] % 16)
    cols = min(size, v.shape[2] - v.shape[2] % 16)
    if rows < 16 or cols < 16:
        raise DataError(f"slices of {v.provenance or 'volume'} are {v.shape[1:]}; need at least 16x16")
    return center_crop(v, rows, cols)


def _load_dir(directory: str) -> list[tuple[str, Volume]]:
    out = []
    for path in _volume_files(directory):
        out.append((path.stem, preprocess(load_volume(path))))
    return out


def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines, optionally under a ``[train]`` section."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[train]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    values: dict[str, str] = {}
    for section in parser.sections():
        values.update(parser[section])
    return values


def _parse_sets(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _load_model(path: str) -> Autoencoder:
    model = Autoencoder()
    try:
        weights = load_weights(path, expected_fingerprint=model.fingerprint)
    except FileNotFoundError:
        raise ConfigError(f"model file {path} not found") from None
    except (IncompatibleWeightsError, WeightFormatError) as exc:
        raise ConfigError(f"model file {path}: {exc}") from exc
    model.load_state(weights)
    model.eval()
    return model


def _finite(x: float):
    return "inf" if math.isinf(x) else x


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = TrainConfig()
    overrides: dict[str, str] = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    overrides.update(_parse_sets(args.set))
    for flag in ("max_steps", "batch_size", "lr", "patch", "val_interval"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = str(value)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for key in ("log_path", "checkpoint_path"):
        overrides.pop(key, None)
    try:
        cfg = cfg.with_overrides(overrides)
        cfg.validate()
    except TrainConfigError as exc:
        raise ConfigError(str(exc)) from exc

    volumes = [v for _, v in _load_dir(args.data)]
    val = [_crop16(v, cfg.patch) for _, v in _load_dir(args.val)] if args.val else []
    model = Autoencoder(seed=cfg.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    with tempfile.TemporaryDirectory(dir=out.parent or ".") as tmp:
        tmp_log = os.path.join(tmp, "log.csv")
        try:
            report = train(model, volumes, val, cfg.with_overrides({"log_path": tmp_log}))
        except TrainConfigError as exc:
            raise ConfigError(str(exc)) from exc
        if not os.path.exists(tmp_log):
            Path(tmp_log).write_text("step,loss,val_loss\n")
        save_weights(model.state(), out)
        os.replace(tmp_log, log_path)
    print(json.dumps({"model": str(out), "log": str(log_path), "steps": len(report.train_loss),
                      "best_step": report.best_step, "best_val_loss": report.best_val_loss,
                      "initial_val_loss": report.initial_val_loss,
                      "stopped_early": report.stopped_early}, indent=2))
    return EXIT_OK


def cmd_superres(args) -> int:
    if args.factor < 2:
        raise ConfigError(f"--factor must be >= 2, got {args.factor}")
    model = _load_model(args.model)
    v = preprocess(load_volume(args.input))
    try:
        out = superresolve_volume(model, v, args.factor)
    except VolumeShapeError as exc:
        raise DataError(str(exc)) from exc
    fmt = FORMAT_CHOICES[args.format] if args.format else None
    write_volume(out, args.out, fmt)
    print(json.dumps({"out": args.out, "shape": list(out.shape), "spacing_mm": list(out.spacing)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    threads = _threads(args.threads)
    model = _load_model(args.model)
    volumes = [(vid, _crop16(v)) for vid, v in _load_dir(args.data)]
    records = evaluate_volumes(model, volumes, METHODS, threads)
    summary = summarize(records)
    export_report(summary, records, args.out, "csv")
    print(json.dumps({"report": args.out, "records": len(records),
                      "wilcoxon_ae_greater": summary.pvalues}, indent=2))
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref, test = load_volume(args.reference), load_volume(args.test)
    if ref.shape != test.shape:
        raise DataError(f"shape mismatch: reference {ref.shape} vs test {test.shape}")
    rows = []
    for k in range(ref.shape[0]):
        a, b = ref.data[k], test.data[k]
        rows.append({"slice_index": k, "psnr_db": psnr(a, b), "ssim": ssim(a, b), "vif": vif(a, b)})
    mean = {m: sum(r[m] for r in rows) / len(rows) for m in ("psnr_db", "ssim", "vif")}
    doc = {"slices": [{k: _finite(v) for k, v in r.items()} for r in rows],
           "mean": {k: _finite(v) for k, v in mean.items()}}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aniso-sr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = p.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log progress")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="errors only")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the autoencoder on a directory of volumes")
    t.add_argument("--data", required=True, help="directory of training volumes")
    t.add_argument("--val", help="directory of validation volumes (enables early stopping)")
    t.add_argument("--out", required=True, help="output weight file")
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.add_argument("--config", help="key = value file of training options")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patch", type=int)
    t.add_argument("--val-interval", dest="val_interval", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any training option (repeatable)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("superres", help="insert synthesized slices into a volume")
    s.add_argument("input", help="input volume")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--factor", type=int, default=2)
    s.add_argument("--format", choices=sorted(FORMAT_CHOICES), help="output format (default: by suffix)")
    s.set_defaults(func=cmd_superres)

    e = sub.add_parser("evaluate", help="slice-drop evaluation of the AE and all baselines")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="directory of test volumes")
    e.add_argument("--out", required=True, help="CSV report; the summary goes next to it")
    e.add_argument("--threads", type=int, help="worker threads (default: $ANISO_SR_THREADS or 1)")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("metrics", help="per-slice PSNR/SSIM/VIF of two volumes")
    m.add_argument("reference")
    m.add_argument("test")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"aniso-sr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"aniso-sr: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, VolumeFormatError, VolumeShapeError, DegenerateInputError,
            FileNotFoundError) as exc:
        print(f"aniso-sr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
