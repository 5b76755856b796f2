"""``burnkit`` command line.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numeric abort (NaN/inf during training).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint
from .data import images_from_folder, load_dataset, write_dataset
from .errors import ConfigError, ContractError, DataError, FormatError, LoadError, NumericAbort

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("burnkit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain_teacher(args) -> int:
    from .trainer import TeacherPretrainConfig, pretrain_teacher

    data = load_dataset(args.data)
    cfg = TeacherPretrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        widths=tuple(args.widths),
        holdout=args.holdout,
        seed=args.seed,
    )
    rows = []

    def on_epoch(e):
        log.info("epoch %d train_loss %.6f heldout_top1 %.6f", e.epoch, e.train_loss, e.heldout_top1)
        rows.append(e)

    ckpt, _ = pretrain_teacher(data, cfg, log=on_epoch)
    out = Path(args.out)
    ckpt.save(out)
    with out.with_name(out.name + ".log.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "heldout_top1"])
        for e in rows:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.heldout_top1)])
    log.info("wrote %s (sha256 %s)", out, ckpt.digest())
    return EXIT_OK


def cmd_burn(args) -> int:
    from .trainer import load_config, run_burn

    overrides = dict(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.iters is not None:
        overrides["iters"] = str(args.iters)
    cfg = load_config(args.config, overrides).with_ablations(args.ablate or [])
    data = load_dataset(args.data)
    teacher = Checkpoint.load(args.teacher)
    t0 = time.perf_counter()
    result = run_burn(cfg, teacher, data, args.out)
    for ck in result.stage_checkpoints:
        stage_reports = [r for r in result.reports if r.stage == ck.stage]
        last = stage_reports[-1] if stage_reports else None
        log.info(
            "stage %d: %d iterations, final loss_total %s",
            ck.stage,
            ck.iteration,
            f"{last.loss_total:.6f}" if last else "n/a",
        )
    log.info("wrote %s in %.1fs (extractor sha256 %s)", args.out, time.perf_counter() - t0, result.extractor.digest())
    return EXIT_OK


def cmd_eval_linear(args) -> int:
    from .linear_eval import ProbeConfig, linear_probe, random_init_extractor, write_results
    from .networks import load_binary_extractor, widths_from_state

    data = load_dataset(args.data)
    if args.test:
        train, test = data, load_dataset(args.test)
        if test.num_classes != train.num_classes:
            raise DataError(f"test set declares {test.num_classes} classes, train set {train.num_classes}")
    else:
        train, test = data.split(args.holdout, seed=args.seed)
    ext = load_binary_extractor(Checkpoint.load(args.extractor))
    method = args.method or "burn"
    if args.random_init:
        # same architecture as the given extractor, fresh weights
        ext = random_init_extractor(
            widths_from_state(ext.state_dict()), ext.in_channels, args.seed, calibrate_on=train, binary_stem=ext.binary_stem
        )
        method = args.method or "random-init"
    cfg = ProbeConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    res = linear_probe(ext, train, test, cfg)
    write_results(args.out, [(args.run_id, method, cfg.lr, res.top1)])
    log.info("%s: top1 %.6f (train %.6f)", method, res.top1, res.train_top1)
    return EXIT_OK


def cmd_ema_sim(args) -> int:
    from .ema_sim import EmaSimConfig, SimMode, run_sim

    try:
        cfg = EmaSimConfig(args.dim, args.eta, args.tau, args.iters, args.runs, SimMode(args.mode), args.seed, args.fp_scale)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    trace = run_sim(cfg)
    agg = trace.write(args.out)
    log.info(
        "%s: final distance mean %.6f std %.6f (runs %s, aggregate %s)",
        cfg.mode.value,
        trace.mean[-1],
        trace.std[-1],
        args.out,
        agg,
    )
    return EXIT_OK


def cmd_xnor_bench(args) -> int:
    from .packed import pack_signs, xnor_gemm

    rng = np.random.default_rng(args.seed)
    a = rng.choice(np.array([-1.0, 1.0], np.float32), size=(args.m, args.k))
    b = rng.choice(np.array([-1.0, 1.0], np.float32), size=(args.k, args.n))
    pa, pb = pack_signs(a), pack_signs(b)
    exact = bool(np.array_equal(xnor_gemm(pa, pb), (a @ b).astype(np.int32)))

    def timed(fn):
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return max(best, 1e-9)

    ops = 2.0 * args.m * args.k * args.n
    t_packed = timed(lambda: xnor_gemm(pa, pb))
    t_float = timed(lambda: a @ b)
    print(f"exact: {'true' if exact else 'false'}")
    print(f"packed_gops: {ops / t_packed / 1e9:.6f}")
    print(f"float_gops: {ops / t_float / 1e9:.6f}")
    print(f"packed_seconds: {t_packed:.6e}")
    print(f"float_seconds: {t_float:.6e}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["m", "k", "n", "exact", "packed_gops", "float_gops", "packed_seconds", "float_seconds"])
            w.writerow([args.m, args.k, args.n, str(exact).lower(), ops / t_packed / 1e9, ops / t_float / 1e9, t_packed, t_float])
    return EXIT_OK if exact else 1


def cmd_synth_data(args) -> int:
    from .synth import make_shapes

    ds = make_shapes(args.n, seed=args.seed, size=args.size)
    write_dataset(args.out, ds)
    log.info("wrote %d images to %s", len(ds), args.out)
    return EXIT_OK


def cmd_convert_images(args) -> int:
    ds = images_from_folder(args.root, size=args.size)
    write_dataset(args.out, ds)
    log.info("wrote %d images in %d classes to %s", len(ds), ds.num_classes, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="burnkit", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain-teacher", help="supervised pretraining of the FP feature extractor")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=_nonneg, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=_positive, default=64)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--widths", type=_positive, nargs="+", default=[16, 32, 64, 128])
    s.add_argument("--holdout", type=float, default=0.1)
    s.set_defaults(func=cmd_pretrain_teacher)

    s = sub.add_parser("burn", help="two-stage BURN pretraining of a binary student")
    s.add_argument("--data", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--ablate", nargs="+", choices=["no-fs", "no-dyn", "no-mst"])
    s.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--seed", type=int)
    s.add_argument("--iters", type=_nonneg)
    s.set_defaults(func=cmd_burn)

    s = sub.add_parser("eval-linear", help="linear probe on a frozen extractor")
    s.add_argument("--data", required=True)
    s.add_argument("--extractor", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test", help="separate held-out dataset (default: split --data)")
    s.add_argument("--holdout", type=float, default=0.2)
    s.add_argument("--epochs", type=_nonneg, default=30)
    s.add_argument("--lr", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--run-id", default="0")
    s.add_argument("--method", help="label for the pretrain_method column")
    s.add_argument("--random-init", action="store_true", help="probe a random-init extractor with the same widths")
    s.set_defaults(func=cmd_eval_linear)

    s = sub.add_parser("ema-sim", help="backbone/target EMA divergence simulation")
    s.add_argument("--mode", choices=["fp", "binary"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, default=100)
    s.add_argument("--eta", type=float, default=4.8)
    s.add_argument("--tau", type=float, default=0.99)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fp-scale", choices=["matched", "raw"], default="matched")
    s.set_defaults(func=cmd_ema_sim)

    s = sub.add_parser("xnor-bench", help="check and time the packed XNOR GEMM")
    s.add_argument("--m", type=_positive, required=True)
    s.add_argument("--k", type=_positive, required=True)
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=_positive, default=3)
    s.add_argument("--out", help="optional CSV with the same fields")
    s.set_defaults(func=cmd_xnor_bench)

    s = sub.add_parser("synth-data", help="write the procedural shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=_nonneg, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=_positive, default=32)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("convert-images", help="convert root/<class>/<image> folders to a dataset file")
    s.add_argument("--root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=_positive, default=32)
    s.set_defaults(func=cmd_convert_images)
    return p


def _thread_limit():
    value = os.environ.get("BURNKIT_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"BURNKIT_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"BURNKIT_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(format="%(message)s", level=logging.INFO, stream=sys.stderr, force=True)
    try:
        args = build_parser().parse_args(argv)
        if args.quiet:
            logging.getLogger().setLevel(logging.WARNING)
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigError, ContractError) as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except (OSError, FormatError, LoadError, DataError) as e:
        log.error("i/o error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
