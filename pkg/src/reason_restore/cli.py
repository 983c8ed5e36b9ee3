"""``reason-restore`` batch tool.

Exit status: 0 success, 1 configuration error, 2 I/O error, 3 partial failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .datasetio import GeneratorConfig, RecordFormatError, evaluate, generate_dataset, load_records
from .diagnose import diagnose, render_report, report_to_record
from .grpo import (CheckpointError, Sample, TrainConfig, TrainState, effective_policy, read_checkpoint,
                   train, write_checkpoint)
from .imgcore import Rng, read_png, write_png
from .restore import init_policy, restore
from .scenes import random_scene

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PARTIAL = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
JOBS_ENV = "REASON_RESTORE_JOBS"

log = logging.getLogger("reason_restore")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("--seed must lie in [0, 2^64)")
    return v


def _int_at_least(lo: int, flag: str):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} must be an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"{flag} must be >= {lo}, got {v}")
        return v
    return parse


def _nonneg_float(flag: str):
    def parse(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} must be a number, got {text!r}") from None
        if not v >= 0:
            raise argparse.ArgumentTypeError(f"{flag} must be >= 0, got {text}")
        return v
    return parse


def _tau(text: str):
    if text == "adaptive":
        return None
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--tau must be 'adaptive' or a positive number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"--tau must be positive, got {text}")
    return v


def _resolve_jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get(JOBS_ENV)
    if env is None:
        return 1
    try:
        jobs = int(env)
    except ValueError:
        raise ConfigError(f"{JOBS_ENV} must be an integer, got {env!r}") from None
    if jobs < 1:
        raise ConfigError(f"{JOBS_ENV} must be >= 1, got {jobs}")
    return jobs


def _image_inputs(paths: list[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"input not found: {p}")
    return files


# --- subcommands ---------------------------------------------------------------------------

def cmd_scenes(args) -> int:
    out = Path(args.out)
    for i in range(args.count):
        write_png(out / f"scene_{i:04d}.png", random_scene(Rng(args.seed, (i,)), args.size, args.size))
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    config = GeneratorConfig()
    if args.config:
        try:
            config = GeneratorConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {args.config}: {exc.strerror}") from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"--config: {exc}") from None
    if args.split:
        config.split = args.split
    manifest = generate_dataset(args.clean, args.out, config, args.seed, jobs=_resolve_jobs(args))
    print(f"dataset {manifest.name!r} split={manifest.split} records={manifest.record_count} "
          f"skipped={len(manifest.skipped)} seed={manifest.master_seed} config={manifest.config_hash[:12]}")
    for s in manifest.skipped:
        print(f"skipped {s['file']}: {s['error']}", file=sys.stderr)
    return EXIT_OK


def _diagnose_file(job):
    path, fmt = job
    try:
        img = read_png(path)
    except Exception as exc:
        return path, None, f"{type(exc).__name__}: {exc}"
    report = diagnose(img)
    path = Path(path)
    if fmt == "record":
        target = path.with_name(path.stem + ".report.json")
        target.write_text(json.dumps(report_to_record(report), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    else:
        target = path.with_name(path.stem + ".report.txt")
        target.write_text(render_report(report), encoding="utf-8")
    return str(path), report.severity, None


def cmd_diagnose(args) -> int:
    files = _image_inputs(args.inputs)
    jobs = [(str(f), args.format) for f in files]
    n_jobs = _resolve_jobs(args)
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_diagnose_file, jobs))
    else:
        results = [_diagnose_file(j) for j in jobs]
    failed = 0
    print("file\tfog\tshake\train\tnoise")
    for path, severity, error in results:
        if error:
            failed += 1
            print(f"error: {path}: {error}", file=sys.stderr)
            continue
        print(path + "\t" + "\t".join(f"{s:.1f}" for s in severity))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_restore(args) -> int:
    offset = None
    if args.checkpoint:
        try:
            offset = read_checkpoint(args.checkpoint).policy
        except OSError as exc:
            print(f"error: cannot read checkpoint {args.checkpoint}: {exc.strerror}", file=sys.stderr)
            return EXIT_IO
        except CheckpointError as exc:
            raise ConfigError(f"--checkpoint: {exc}") from None
    else:
        print("warning: no --checkpoint given; restoring with report-seeded parameters", file=sys.stderr)
    out = Path(args.out)
    failed = 0
    for path in _image_inputs(args.inputs):
        try:
            img = read_png(path)
        except Exception as exc:
            failed += 1
            print(f"error: {path}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        report = diagnose(img)
        policy = init_policy(report) if offset is None else effective_policy(offset, report)
        write_png(out / f"{path.stem}.png", restore(img, policy.params))
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_train(args) -> int:
    root = Path(args.dataset)
    out = Path(args.out) if args.out else root / "grpo"
    try:
        _, records = load_records(root)
    except RecordFormatError as exc:
        raise ConfigError(f"--dataset: {exc}") from None
    samples = [Sample(read_png(root / r.degraded_path), read_png(root / r.clean_path)) for r in records]
    config = TrainConfig(group_size=args.group, tau=args.tau, learning_rate=args.lr, steps=args.steps,
                         seed=args.seed, batch_size=args.batch)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "checkpoint.txt", out / "train_log.tsv"
    state = None
    mode = "w"
    if args.resume and ckpt_path.exists():
        try:
            state = read_checkpoint(ckpt_path)
        except CheckpointError as exc:
            raise ConfigError(f"--resume: {exc}") from None
        state.config = config
        mode = "a"
        if log_path.exists():
            kept = log_path.read_text(encoding="utf-8").splitlines()[:state.step]
            log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
    with open(log_path, mode, encoding="utf-8") as log_file:
        def on_step(st: TrainState, entry):
            log_file.write(entry.line() + "\n")
            log_file.flush()
            if st.step % args.checkpoint_every == 0 or st.step == config.steps:
                write_checkpoint(ckpt_path, st)
            log.info("step %d loss %.5f reward %.3f psnr %.3f", entry.step, entry.loss,
                     entry.mean_reward, entry.mean_psnr)

        state = train(samples, config, state, on_step=on_step)
    write_checkpoint(ckpt_path, state)
    print(f"trained {state.step} steps; checkpoint {ckpt_path}; log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        result = evaluate(args.dataset, args.restored)
    except RecordFormatError as exc:
        raise ConfigError(f"--dataset: {exc}") from None
    table = result.table()
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    if not result.complete:
        print(f"error: {len(result.missing)} restored image(s) missing: {', '.join(result.missing)}",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reason-restore", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def jobs_flag(sp):
        sp.add_argument("--jobs", type=_int_at_least(1, "--jobs"), default=None,
                        help=f"worker processes (default: ${JOBS_ENV} or 1)")

    sp = sub.add_parser("scenes", help="write procedural clean scenes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=_int_at_least(1, "--count"), default=20)
    sp.add_argument("--size", type=_int_at_least(32, "--size"), default=64)
    sp.add_argument("--seed", type=_seed, default=0)
    sp.set_defaults(func=cmd_scenes)

    sp = sub.add_parser("degrade", help="generate a degraded dataset from clean images")
    sp.add_argument("--clean", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=_seed, default=0)
    sp.add_argument("--config", help="generator config JSON")
    sp.add_argument("--split", choices=("train", "test"))
    jobs_flag(sp)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("diagnose", help="write a diagnostic report beside each image")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--format", choices=("text", "record"), default="text")
    jobs_flag(sp)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("restore", help="diagnose and restore images")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("train", help="GRPO-tune the restoration policy on a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", help="checkpoint/log directory (default: <dataset>/grpo)")
    sp.add_argument("--steps", type=_int_at_least(0, "--steps"), default=200)
    sp.add_argument("--group", type=_int_at_least(2, "--group"), default=8)
    sp.add_argument("--batch", type=_int_at_least(1, "--batch"), default=1)
    sp.add_argument("--seed", type=_seed, default=0)
    sp.add_argument("--tau", type=_tau, default=None, help="'adaptive' (default) or a fixed temperature")
    sp.add_argument("--lr", type=_nonneg_float("--lr"), default=1e-3)
    sp.add_argument("--checkpoint-every", type=_int_at_least(1, "--checkpoint-every"), default=10)
    sp.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.txt")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM table of restored images against clean references")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--restored", required=True)
    sp.add_argument("--out", help="also write the table to this file")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
