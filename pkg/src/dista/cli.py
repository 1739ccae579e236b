"""Command-line entry point: ``dista train|eval|gradcheck|ablate``.

Exit codes
----------
0  success
1  usage or configuration error
2  numeric failure (non-finite loss or gradient)
3  I/O failure (missing data, unwritable output, locked output dir, bad file)
4  checkpoint/config incompatibility
5  gradient check above tolerance
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import records
from .checkpoint import CompatError, apply_checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataError, gen_temporal_synthetic, load_cifar10
from .model import DISTA
from .numerics import ContractError
from .training import (
    MetricsRow,
    OptimState,
    TrainingError,
    evaluate,
    gradcheck_model,
    group_errors,
    tau_closed_form_check,
    train_epoch,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO, EXIT_COMPAT, EXIT_GRADCHECK = range(6)
GRADCHECK_TOL = 1e-4
ABLATION_AXES = ("timesteps", "taw_size", "denoise_threshold", "adn_blocks")
ABLATION_FIELDS = ("axis", "value", "test_acc", "best_test_acc", "test_loss", "train_acc",
                   "train_loss", "tau_mean")


class UsageError(Exception):
    pass


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def build_datasets(cfg: RunConfig):
    if cfg.dataset == "synthetic":
        return gen_temporal_synthetic(cfg.synthetic_spec())
    try:
        return load_cifar10(cfg.cifar_dir, cfg.class_list(), cfg.train_limit or None, cfg.test_limit or None)
    except (FileNotFoundError, records.FormatError, DataError) as exc:
        raise CommandError(EXIT_IO, str(exc)) from None


def build_model(cfg: RunConfig, dtype=None) -> DISTA:
    mcfg = cfg.model_config()
    mcfg.validate()
    return DISTA(mcfg, seed=cfg.seed, dtype=dtype or cfg.np_dtype)


def shuffle_state(seed: int, epoch: int) -> dict:
    """Generator state that shuffles epoch ``epoch``; stored in checkpoints."""
    st = np.random.default_rng([seed, epoch]).bit_generator.state
    return {"seed": seed, "next_epoch": epoch, "bit_generator": st}


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file so two commands never share an output directory."""
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(EXIT_IO, f"{out_dir} is locked by another run ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def format_row(row: MetricsRow, wall: bool) -> list[str]:
    out = []
    for name in MetricsRow.FIELDS:
        v = getattr(row, name)
        if name == "wall_seconds" and not wall:
            v = 0.0
        out.append(str(v) if isinstance(v, int) else repr(float(v)))
    return out


def _csv_line(values) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(values)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, resume: str | None = None, run_epochs: int | None = None,
              out=sys.stdout) -> int:
    """Train, appending one metrics row per epoch and checkpointing.

    ``resume`` restarts from a checkpoint; ``run_epochs`` stops after that
    many epochs of this invocation (the schedule still spans ``cfg.epochs``).
    """
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot create {out_dir}: {exc}") from None
    train, test = build_datasets(cfg)
    model = build_model(cfg)
    hyper = cfg.train_hyper()
    optim = OptimState()
    start = 0
    if resume:
        ckpt = _load_ckpt(resume)
        apply_checkpoint(ckpt, model, optim)
        start = ckpt.epoch
        if ckpt.rng_state.get("seed", cfg.seed) != cfg.seed:
            raise CommandError(EXIT_COMPAT, "checkpoint was written with a different seed")
    stop = cfg.epochs if run_epochs is None else min(cfg.epochs, start + run_epochs)
    metrics = out_dir / "metrics.csv"

    with output_lock(out_dir):
        try:
            if not resume or not metrics.exists():
                metrics.write_text(_csv_line(MetricsRow.FIELDS))
            for epoch in range(start, stop):
                row = train_epoch(model, train, hyper, optim, epoch)
                row.test_acc, row.test_loss = evaluate(model, test)
                with metrics.open("a") as fh:
                    fh.write(_csv_line(format_row(row, cfg.record_wall_time)))
                done = epoch + 1
                if done % cfg.checkpoint_every == 0 or done == stop:
                    save_checkpoint(cfg.checkpoint_path, model, optim, done,
                                    shuffle_state(cfg.seed, done), cfg.to_text())
                print(f"epoch={epoch} train_loss={row.train_loss:.4f} train_acc={row.train_acc:.4f} "
                      f"test_acc={row.test_acc:.4f} lr={row.lr:.6f}", file=out)
        except OSError as exc:
            raise CommandError(EXIT_IO, f"write failed: {exc}") from None
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except records.VersionError as exc:
        raise CommandError(EXIT_COMPAT, str(exc)) from None
    except (OSError, records.FormatError) as exc:
        raise CommandError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from None


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, out=sys.stdout) -> int:
    ckpt = _load_ckpt(checkpoint or cfg.checkpoint_path)
    model = build_model(cfg)
    apply_checkpoint(ckpt, model)
    _, test = build_datasets(cfg)
    acc, loss = evaluate(model, test)
    print(f"test_acc={acc!r} test_loss={loss!r}", file=out)
    return EXIT_OK


def gradcheck_batch(cfg: RunConfig, batch: int = 3):
    """A small deterministic float64 batch matching the configured input."""
    mcfg = cfg.model_config()
    rng = np.random.default_rng([cfg.seed, 7])
    if mcfg.patch_size is None:
        x = rng.normal(0.0, 1.0, (mcfg.timesteps, batch, mcfg.tokens, mcfg.in_features))
    else:
        x = rng.normal(0.0, 1.0, (batch, mcfg.channels, mcfg.image_size, mcfg.image_size))
    y = np.arange(batch) % mcfg.num_classes
    return x, y


def cmd_gradcheck(cfg: RunConfig, out=sys.stdout, tol: float = GRADCHECK_TOL) -> int:
    model = build_model(cfg, dtype=np.float64)
    x, y = gradcheck_batch(cfg)
    groups = group_errors(gradcheck_model(model, x, y))
    bptt, closed = tau_closed_form_check()
    cf_err = abs(bptt - closed) / abs(closed)
    groups["tau_closed_form"] = cf_err
    bad = []
    for name in sorted(groups):
        flag = "ok" if groups[name] < tol else "FAIL"
        if flag == "FAIL":
            bad.append(name)
        print(f"{name} max_rel_err={groups[name]:.3e} {flag}", file=out)
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=out)
        return EXIT_GRADCHECK
    return EXIT_OK


def run_setting(cfg: RunConfig) -> dict:
    train, test = build_datasets(cfg)
    model = build_model(cfg)
    hyper = cfg.train_hyper()
    optim = OptimState()
    best, row = 0.0, None
    for epoch in range(cfg.epochs):
        row = train_epoch(model, train, hyper, optim, epoch)
        row.test_acc, row.test_loss = evaluate(model, test)
        best = max(best, row.test_acc)
    return {"test_acc": row.test_acc, "best_test_acc": best, "test_loss": row.test_loss,
            "train_acc": row.train_acc, "train_loss": row.train_loss, "tau_mean": row.tau_mean}


def ablation_config(cfg: RunConfig, axis: str, value: str) -> RunConfig:
    if axis == "denoise_threshold":
        new = cfg.replace(denoise_threshold=float(value))
    elif axis == "timesteps":
        t = int(value)
        new = cfg.replace(timesteps=t, taw_size=min(cfg.taw_size, t))
    else:
        new = cfg.replace(**{axis: int(value)})
    return new.validate(check_paths=False)


def cmd_ablate(cfg: RunConfig, axis: str, values: list[str], out=sys.stdout) -> int:
    if axis not in ABLATION_AXES:
        raise UsageError(f"axis must be one of {', '.join(ABLATION_AXES)}")
    if not values:
        raise UsageError("--values needs at least one entry")
    settings = [ablation_config(cfg, axis, v) for v in values]
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot create {out_dir}: {exc}") from None
    path = out_dir / "ablation.csv"
    with output_lock(out_dir):
        path.write_text(_csv_line(ABLATION_FIELDS))
        for v, sub in zip(values, settings):
            res = run_setting(sub)
            line = [axis, v] + [repr(float(res[k])) for k in ABLATION_FIELDS[2:]]
            with path.open("a") as fh:
                fh.write(_csv_line(line))
            print(f"{axis}={v} test_acc={res['test_acc']:.4f} best={res['best_test_acc']:.4f}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dista", description="Spiking transformer with temporal attention windows.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "gradcheck", "ablate"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="flat key = value config file")
        s.add_argument("--checkpoint", help="checkpoint path (written by train, read by eval)")
        s.add_argument("--out", help="output directory, overrides out_dir")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "train":
            s.add_argument("--resume", help="continue from this checkpoint")
            s.add_argument("--run-epochs", type=int, help="stop after this many epochs")
        if name == "ablate":
            s.add_argument("--axis", required=True, choices=ABLATION_AXES)
            s.add_argument("--values", required=True, help="comma-separated values")
    return p


def _resolve_config(args) -> RunConfig:
    needs_data = args.command != "gradcheck"
    cfg = load_config(args.config, validate=False)
    overrides = {}
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if args.out:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed", "must be nonnegative")
        overrides["seed"] = args.seed
    return cfg.replace(**overrides).validate(check_paths=needs_data)


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = make_parser().parse_args(argv)
        cfg = _resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.run_epochs, out=out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out=out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out=out)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        return cmd_ablate(cfg, args.axis, values, out=out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        code = EXIT_IO if exc.key in ("data_dir", "out_dir") else EXIT_USAGE
        print(f"config error: {exc}", file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CompatError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (TrainingError, FloatingPointError, ContractError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
