"""Command-line entry point.

CSV goes to stdout (and to ``<out>/*.csv`` when an output directory is given),
the human-readable summary goes to stderr. Figures are written next to the CSVs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CorruptCheckpointError, UnsupportedFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import DataFormatError, generate_synthetic_dataset, load_dataset
from .pipeline import NumericError, correct, evaluate, predict, train_pipeline
from .tensor import ContractError, DimensionError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

GRAD_TOL = 1e-3

log = logging.getLogger("fourier_age")


def _emit(rows, header, out_dir: Path | None, name: str) -> None:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if out_dir is not None:
        with open(out_dir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def _summary(text: str) -> None:
    print(text, file=sys.stderr)


def _out_dir(path) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create {out}: {exc}") from exc
    return out


def _check_shape(dataset, config: RunConfig, where: str) -> None:
    a = config.alignment
    expected = (a.image_size, a.image_size, a.in_channels)
    if tuple(dataset.images.shape[1:]) != expected:
        raise DataFormatError(f"{where}: images are {tuple(dataset.images.shape[1:])}, "
                              f"model expects {expected}")


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    manifest = generate_synthetic_dataset(args.seed, args.n, args.size, args.out)
    ages = np.asarray(manifest.ages)
    rows = [("n", manifest.n), ("size", args.size), ("seed", manifest.seed),
            ("age_min", float(ages.min())), ("age_max", float(ages.max()))]
    rows += [(f"{k}_count", hi - lo) for k, (lo, hi) in manifest.splits.items()]
    _emit([(k, _fmt(v)) for k, v in rows], ("field", "value"), Path(args.out), "dataset.csv")
    _summary(f"wrote {manifest.n} samples ({args.size}x{args.size}) to {args.out} "
             f"in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_predictions, plot_training

    config = RunConfig.load(args.config) if args.config else RunConfig()
    dataset = load_dataset(args.data)
    _check_shape(dataset, config, args.data)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    bundle, report = train_pipeline(config, dataset, split=args.split)
    save_checkpoint(bundle, out / "model.ckpt")
    (out / "config.json").write_text(config.to_json())
    _emit([(k, _fmt(v)) for k, v in report.rows()], ("metric", "value"), out, "metrics.csv")
    plot_training(report.epoch_losses, report.val_mae_curve, out / "training.png",
                  baseline=report.mean_predictor_mae)
    va_x, va_y = dataset.split(args.split)
    base, _ = predict(bundle.model, va_x)
    plot_predictions(base, va_y, out / "predictions.png", title=f"{args.split} (before correction)")
    _summary(f"trained {config.epochs} epochs in {time.perf_counter() - t0:.0f}s\n"
             f"{args.split} MAE {report.mae:.3f} (base {report.base_mae:.3f}, "
             f"mean-age predictor {report.mean_predictor_mae:.3f}), "
             f"CS@{report.cs_threshold:g} {report.cs:.1f}%\n"
             f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import plot_predictions

    bundle = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_shape(dataset, bundle.config, args.data)
    x, y = dataset.split(args.split)
    ev = evaluate(bundle, x, y, cs_threshold=args.cs_threshold,
                  use_correction=False if args.no_correction else None)
    out = _out_dir(args.out)
    rows = [("n", len(y)), ("mae", ev["mae"]), (f"cs@{ev['cs_threshold']:g}", ev["cs"]),
            ("base_mae", ev["base_mae"])]
    _emit([(k, _fmt(v)) for k, v in rows], ("metric", "value"), out, "eval.csv")
    if out is not None:
        plot_predictions(ev["final"], y, out / "eval_predictions.png", title=args.split)
    _summary(f"{args.split}: {len(y)} samples, MAE {ev['mae']:.3f} years "
             f"(before correction {ev['base_mae']:.3f}), CS@{ev['cs_threshold']:g} {ev['cs']:.1f}%")
    return EXIT_OK


def cmd_correct(args) -> int:
    from .correction import write_trace_csv
    from .metrics import mae_metric
    from .plotting import plot_correction_traces

    bundle = load_checkpoint(args.checkpoint)
    if bundle.ensemble is None:
        raise DataFormatError(f"{args.checkpoint}: checkpoint has no error-correction state")
    cc = bundle.config.correction
    bundle.config.correction = dataclasses.replace(
        cc, epsilon=cc.epsilon if args.epsilon is None else args.epsilon,
        max_iters=cc.max_iters if args.max_iters is None else args.max_iters)
    dataset = load_dataset(args.data)
    _check_shape(dataset, bundle.config, args.data)
    x, y = dataset.split(args.split)
    base, emb = predict(bundle.model, x)
    final, results = correct(bundle, emb, base)
    out = _out_dir(args.out)
    rows = [(i, f"{b:.4f}", f"{f:.4f}", f"{t:.4f}", r.iterations)
            for i, (b, f, t, r) in enumerate(zip(base, final, y, results))]
    _emit(rows, ("sample", "base_age", "corrected_age", "true_age", "iterations"), out, "corrected.csv")
    if out is not None:
        write_trace_csv(out / "traces.csv", results)
        plot_correction_traces(results, out / "traces.png")
    iters = np.array([r.iterations for r in results])
    _summary(f"{len(y)} samples, epsilon {bundle.config.correction.epsilon:g}, "
             f"max iterations {bundle.config.correction.max_iters}\n"
             f"MAE {mae_metric(base, y):.3f} -> {mae_metric(final, y):.3f}; "
             f"iterations mean {iters.mean():.2f}, max {iters.max()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import benchmark_mixing
    from .plotting import plot_benchmark

    tokens = [int(t) for t in args.tokens.split(",") if t.strip()]
    res = benchmark_mixing(tokens, channels=args.channels, repetitions=args.reps, seed=args.seed)
    out = _out_dir(args.out)
    rows = [(n, f"{f:.6g}", f"{a:.6g}") for n, f, a in res.rows()]
    _emit(rows, ("tokens", "fourier_seconds", "attention_seconds"), out, "bench.csv")
    if out is not None:
        plot_benchmark(res, out / "bench.png")
    _summary(f"log-log slope: Fourier {res.fourier_slope:.3f} (residual {res.fourier_residual:.3f}), "
             f"attention {res.attention_slope:.3f} (residual {res.attention_residual:.3f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    t0 = time.perf_counter()
    results = run_all(seed=args.seed, points=args.points, composite_points=args.points)
    rows = [(name, f"{err:.3e}", "ok" if err < GRAD_TOL else "FAIL") for name, err in results]
    _emit(rows, ("case", "relative_error", "status"), None, "")
    failed = [name for name, err in results if not err < GRAD_TOL]
    _summary(f"{len(results) - len(failed)}/{len(results)} cases below {GRAD_TOL:g} "
             f"in {time.perf_counter() - t0:.1f}s" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fourier-age",
                                description="Fourier-mixing age estimation on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the seeded synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the model and the error corrector")
    t.add_argument("--config", help="JSON file mirroring RunConfig field names")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="val", choices=("val", "test"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MAE and CS of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--cs-threshold", type=float, default=None)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--no-correction", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("correct", help="run the correction loop and dump per-sample traces")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--epsilon", type=float, default=None)
    c.add_argument("--max-iters", type=int, default=None)
    c.add_argument("--split", default="test", choices=("train", "val", "test"))
    c.add_argument("--out")
    c.set_defaults(func=cmd_correct)

    b = sub.add_parser("bench", help="time the Fourier mixer against attention")
    b.add_argument("--tokens", default="256,1024,4096,16384")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--channels", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--points", type=int, default=5, help="random points per case")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _summary(f"config error: {exc}")
        return EXIT_CONFIG
    except (DataFormatError, UnsupportedFormatError, CorruptCheckpointError,
            FileNotFoundError, KeyError, DimensionError) as exc:
        _summary(f"data error: {exc}")
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        _summary(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (ContractError, ValueError) as exc:
        _summary(f"invalid argument: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
