"""Command-line entry point: ``koopcon condense | eval | selftest``.

Exit codes: 0 success, 1 failed self check or internal error, 2 usage or
configuration error, 3 data/format/compatibility error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .condense import export_condensed, import_condensed, run_condensation, save_checkpoint
from .config import RunConfig, load_config
from .datasets import LabeledImages, load_dataset, make_toy_dataset, stratified_limit
from .errors import ConfigError, DataError, DimensionError, KoopconError, NumericError
from .evalharness import run_comparison

log = logging.getLogger("koopcon")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONDENSED_FILE = "condensed.kpcn"
CHECKPOINT_FILE = "checkpoint.kpck"
LOSS_FILE = "loss_history.csv"
SPREAD_FILE = "spread.csv"
REPORT_CSV = "eval_report.csv"
REPORT_TXT = "eval_report.txt"


def thread_count() -> int:
    raw = os.environ.get("KOOPCON_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"KOOPCON_THREADS must be a positive integer, got {raw!r}", key="KOOPCON_THREADS") from None
    if value < 1:
        raise ConfigError(f"KOOPCON_THREADS must be a positive integer, got {raw!r}", key="KOOPCON_THREADS")
    return value


def load_run_data(cfg: RunConfig) -> Tuple[LabeledImages, LabeledImages]:
    """Training and test sets named by the config."""
    if cfg.dataset == "toy":
        kwargs = dict(class_count=cfg.toy_classes, per_class=cfg.toy_per_class, size=cfg.toy_size)
        return make_toy_dataset(seed=cfg.seed, **kwargs), make_toy_dataset(seed=cfg.seed + 1, **kwargs)
    train = load_dataset(cfg.dataset, cfg.data_dir, "train")
    test = load_dataset(cfg.dataset, cfg.data_dir, "test")
    if cfg.train_per_class is not None:
        train = stratified_limit(train, cfg.train_per_class, np.random.SeedSequence([cfg.seed, 5]))
    return train, test


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, name: str, cfg: RunConfig, artifacts: Sequence[str], extra: Optional[dict] = None) -> Path:
    """Everything needed to rerun: the full config, its hash, the seed and artifact digests."""
    manifest = {
        "koopcon_version": __version__,
        "config": cfg.model_dump(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "threads": thread_count(),
        "artifacts": {a: _sha256(out / a) for a in artifacts},
    }
    manifest.update(extra or {})
    path = out / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _output_dir(cfg: RunConfig, override: Optional[str]) -> Path:
    out = Path(override if override is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror or exc}", key="output_dir") from None
    return out


def cmd_condense(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(cfg, args.output_dir)
    train, _ = load_run_data(cfg)
    ccfg = cfg.condense_config()
    log.info("condensing %s: %d images, %d classes, %d epochs", cfg.dataset, len(train), train.class_count, ccfg.epochs)

    def progress(epoch, history):
        if epoch == 1 or epoch % max(1, ccfg.epochs // 10) == 0:
            log.info("epoch %d/%d total loss %.5f", epoch, ccfg.epochs, history.epoch_totals()[-1])

    started = time.perf_counter()
    condensed, params, history = run_condensation(train, ccfg, progress)
    export_condensed(condensed, out / CONDENSED_FILE)
    save_checkpoint(params, ccfg, out / CHECKPOINT_FILE, train.geometry, train.class_count)
    history.write_csv(out / LOSS_FILE)
    history.write_spread_csv(out / SPREAD_FILE)
    artifacts = [CONDENSED_FILE, CHECKPOINT_FILE, LOSS_FILE, SPREAD_FILE]
    write_manifest(out, "manifest.json", cfg, artifacts, {"command": "condense"})
    log.info("wrote %s in %.1fs", ", ".join(artifacts), time.perf_counter() - started)
    print(out / CONDENSED_FILE)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(cfg, args.output_dir)
    condensed = import_condensed(args.condensed)
    source = condensed.provenance.get("config", {}).get("dataset")
    if source is not None and source != cfg.dataset:
        raise DataError(f"condensed set was built from {source!r}, config names {cfg.dataset!r}")
    if condensed.config_hash != cfg.condense_config().hash():
        log.warning("condensed set was produced under a different condensation config")
    train, test = load_run_data(cfg)
    report = run_comparison(train, test, condensed, cfg.eval_config())
    (out / REPORT_CSV).write_text(report.to_csv())
    (out / REPORT_TXT).write_text(report.to_table())
    write_manifest(
        out,
        "eval_manifest.json",
        cfg,
        [REPORT_CSV, REPORT_TXT],
        {"command": "eval", "condensed_sha256": _sha256(Path(args.condensed))},
    )
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import main as selftest_main

    return EXIT_OK if selftest_main(print) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopcon", description="Autoencoder and optimal-transport dataset condensation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{condense,eval,selftest}")

    p = sub.add_parser("condense", help="train the condensation model and export the condensed set")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--output-dir", help="overrides output_dir from the config")
    p.set_defaults(func=cmd_condense)

    p = sub.add_parser("eval", help="compare classifiers trained on condensed and real subsets")
    p.add_argument("--condensed", required=True, help="condensed set file (.kpcn)")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--output-dir", help="overrides output_dir from the config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="finite-difference gradient checks and Sinkhorn vs exact OT")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        with threadpool_limits(limits=thread_count()):
            return args.func(args)
    except ConfigError as exc:
        print(f"koopcon: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError) as exc:
        print(f"koopcon: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"koopcon: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KoopconError as exc:
        print(f"koopcon: error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as exc:
        print(f"koopcon: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
