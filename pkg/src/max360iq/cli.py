"""Command-line interface: synth, extract, train, predict, eval, gradcheck,
sweep-k. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_run_config
from .data import (ManifestError, SynthSpec, generate_synthetic, load_manifest,
                   split_train_test)
from .evaluation import DegenerateInputError, evaluate
from .gradcheck import run_suite
from .ndgrad import NumericError
from .objective import DegenerateBatchError
from .sphere import ErpImage, GeometryError, extract_sequences, save_sequence
from .trainer import build_samples, load_checkpoint, predict, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write_text(path, buf.getvalue())


def cmd_synth(args) -> int:
    spec = SynthSpec(n_scenes=args.scenes, erp_width=args.width,
                     erp_height=args.height, levels=args.levels,
                     mode=args.mode, recency_lambda=args.recency_lambda,
                     seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_extract(args) -> int:
    _, entries = load_manifest(args.manifest)
    out = Path(args.out)
    fov = np.deg2rad(args.fov)
    n_files = 0
    for entry in entries:
        img = ErpImage.load(entry.erp_path)
        if args.mode == "equator":
            seqs = extract_sequences(img, None, args.k, fov, args.size,
                                     entry.image_id)
        else:
            if not entry.scanpaths:
                print(f"error: {entry.image_id} has no scanpaths for "
                      f"scanpath mode", file=sys.stderr)
                return EXIT_DATA
            sps = [entry.scanpaths[c]
                   for c in sorted(entry.scanpaths, key=lambda c: c.value)]
            seqs = extract_sequences(img, sps, args.k, fov, args.size,
                                     entry.image_id)
        for seq in seqs:
            cond = seq.condition.value if seq.condition else "equator"
            n_files += len(save_sequence(seq, out, f"{entry.image_id}_{cond}"))
    print(f"wrote {n_files} viewports to {out}")
    return EXIT_OK


def _load_split_samples(args, run):
    header, entries = load_manifest(args.manifest)
    mode = header.get("mode", "uniform")
    tr, te = split_train_test(entries, args.ratio, args.split_seed)
    return (mode, build_samples(tr, run.train, mode),
            build_samples(te, run.train, mode))


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    mode, train_samples, val_samples = _load_split_samples(args, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_file = out / "train_log.jsonl"
    if log_file.exists():
        log_file.unlink()
    result = train(run.train, run.backbone, run.head, train_samples,
                   val_samples, out, log_file)
    _atomic_write_text(out / "run_config.json",
                       json.dumps(run.to_dict(), indent=2, sort_keys=True))
    if args.figures and result.log:
        from .report import render_training_log
        render_training_log(result.log, out / "training.png")
    final = result.log[-1] if result.log else {}
    print(f"trained {mode} model: {len(train_samples)} train sequences, "
          f"final loss {final.get('loss')}, "
          f"val SRCC {final.get('val_srcc')}; checkpoints in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    header, entries = load_manifest(args.manifest)
    mode = header.get("mode", "uniform")
    samples = build_samples(entries, cfg, mode)
    rows, image_scores = predict(model, samples)
    out = Path(args.out)
    _write_csv(out, ["image_id", "condition", "pred", "mos"],
               [[r["image_id"], r["condition"], repr(r["pred"]), repr(r["mos"])]
                for r in rows])
    if args.image_scores:
        _atomic_write_text(Path(args.image_scores),
                           json.dumps(image_scores, indent=2, sort_keys=True))
    print(f"wrote {len(rows)} sequence predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.predictions)
    if not path.exists():
        print(f"error: missing predictions file {path}", file=sys.stderr)
        return EXIT_DATA
    with path.open() as f:
        rows = list(csv.DictReader(f))
    if not rows:
        print("error: empty predictions file", file=sys.stderr)
        return EXIT_DATA
    preds = np.array([float(r["pred"]) for r in rows])
    mos = np.array([float(r["mos"]) for r in rows])
    conditions = [r.get("condition", "") for r in rows]
    labels = conditions if any(conditions) else None
    report = evaluate(preds, mos, labels)
    out_report = Path(args.out_report)
    _atomic_write_text(out_report,
                       json.dumps(report.to_dict(), indent=2, sort_keys=True))
    from .evaluation import logistic5
    mapped = logistic5(preds, np.array(report.theta))
    scatter_rows = [[r["image_id"], c, repr(float(p)), repr(float(m)),
                     repr(float(mp))]
                    for r, c, p, m, mp in zip(rows, conditions, preds, mos,
                                              mapped)]
    if args.out_scatter:
        _write_csv(Path(args.out_scatter),
                   ["image_id", "condition", "pred", "mos", "mapped_pred"],
                   scatter_rows)
    if args.figures:
        from .report import render_scatter
        fig_path = out_report.with_suffix(".png")
        render_scatter([{"condition": c, "pred": float(p), "mos": float(m)}
                        for c, p, m in zip(conditions, preds, mos)],
                       report.theta, fig_path)
    print(f"n={report.n} PLCC={report.plcc:.4f} SRCC={report.srcc:.4f} "
          f"RMSE={report.rmse:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt_backward:  # negative-control hook for tests
        from . import ndgrad as ng

        def corrupted_relu(a):
            out = np.maximum(a.data, 0.0)

            def bwd(g):
                return [(a, g * (a.data > 0) * 1.05)]

            return ng._node(out, (a,), bwd, "relu")

        ng.relu = corrupted_relu
    results = run_suite(seeds=args.seeds,
                        end_to_end_seeds=args.end_to_end_seeds)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:24s} max_rel_err={r.max_rel_err:.3e} "
              f"tol={r.tolerance:.0e} {status}")
        failed = failed or not r.ok
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_sweep_k(args) -> int:
    run = load_run_config(args.config, args.set)
    header, entries = load_manifest(args.manifest)
    mode = header.get("mode", "uniform")
    tr, te = split_train_test(entries, args.ratio, args.split_seed)
    ks = [int(k) for k in args.k_list.split(",")]
    out_rows = []
    plccs, srccs = [], []
    for k in ks:
        from dataclasses import replace
        cfg = replace(run.train, k=k)
        train_samples = build_samples(tr, cfg, mode)
        val_samples = build_samples(te, cfg, mode)
        result = train(cfg, run.backbone, run.head, train_samples, val_samples)
        preds_rows, _ = predict(result.model, val_samples)
        preds = np.array([r["pred"] for r in preds_rows])
        mos = np.array([r["mos"] for r in preds_rows])
        report = evaluate(preds, mos)
        out_rows.append([k, repr(report.plcc), repr(report.srcc),
                         repr(report.rmse)])
        plccs.append(report.plcc)
        srccs.append(report.srcc)
        print(f"K={k}: PLCC={report.plcc:.4f} SRCC={report.srcc:.4f} "
              f"RMSE={report.rmse:.4f}")
    out = Path(args.out)
    _write_csv(out, ["k", "plcc", "srcc", "rmse"], out_rows)
    if args.figures:
        from .report import render_sweep
        render_sweep(ks, plccs, srccs, out.with_suffix(".png"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="max360iq",
        description="Blind 360-degree image quality assessment pipeline")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("MAX360IQ_THREADS", "1")),
                        help="bound on internal parallelism (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic micro-dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--mode", choices=["uniform", "nonuniform"],
                   default="uniform")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--recency-lambda", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="render viewports to PNG + sidecars")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--fov", type=float, default=90.0, help="degrees")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--mode", choices=["scanpath", "equator"],
                   default="equator")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction,
                   default=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    p.add_argument("--image-scores", default=None, help="per-image JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics report from a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out-report", required=True, help="report JSON")
    p.add_argument("--out-scatter", default=None, help="scatter CSV")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction,
                   default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--end-to-end-seeds", type=int, default=2)
    p.add_argument("--corrupt-backward", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-k", help="retrain across viewport counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV of K vs metrics")
    p.add_argument("--k-list", default="3,5,7")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction,
                   default=True)
    p.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        return args.func(args)
    except (ManifestError, GeometryError, FileNotFoundError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateBatchError, DegenerateInputError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
