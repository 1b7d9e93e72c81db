"""``cottad`` command-line entry point.

Exit codes: 0 success, 1 contract violation (a check failed), 2 bad usage or
invalid input (missing paths, malformed configs or labels).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import cten
from . import tensor as T
from .schemas import validate

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _input_shape(spec: str | None, graph) -> list[int]:
    """``64`` or ``64x48`` (H x W); channels come from the config."""
    if spec is None:
        return list(graph.input_shape)
    try:
        parts = [int(v) for v in spec.lower().split("x")]
    except ValueError:
        raise UsageError(f"--input-size must look like 64 or 64x48, got {spec!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise UsageError(f"--input-size must look like 64 or 64x48, got {spec!r}")
    return [graph.input_shape[0], *parts]


def _load_graph(path):
    import jsonschema

    from .model import ModelConfigError, load_config

    if path is not None and not Path(path).is_file():
        raise UsageError(f"config not found: {path}")
    try:
        return load_config(path)
    except jsonschema.ValidationError as e:
        raise UsageError(f"invalid model config at {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}") from None
    except (ModelConfigError, ValueError) as e:
        raise UsageError(f"invalid model config: {e}") from None


def _emit(doc: dict, schema: str, out: str | None, text: str | None = None) -> None:
    validate(doc, schema)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(doc, indent=2))
    if text is not None:
        print(text)
    elif not out:
        print(json.dumps(doc, indent=2))


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {path}")
    return p


# -- commands ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradsuite import report, run_all

    results = run_all(args.scope, args.instances, args.seed, args.tol)
    doc = report(results, args.scope, args.tol)
    lines = [f"{r.group:<10} {r.name:<26} n={r.instances:<3} rejected={r.rejected:<3} max_rel_err={r.max_rel_err:.2e} "
             f"{'PASS' if r.passed else 'FAIL'}" for r in results]
    _emit(doc, "gradcheck_report", args.out, "\n".join(lines))
    return EXIT_OK if doc["passed"] else EXIT_VIOLATION


def cmd_shapes(args) -> int:
    from .model import ModelConfigError, build

    graph = _load_graph(args.config)
    shape = _input_shape(args.input_size, graph)
    try:
        model = build(graph, seed=args.seed)
        rows = model.shape_table(shape)
    except (ModelConfigError, ValueError) as e:
        print(f"shape audit failed: {e}", file=sys.stderr)
        return EXIT_VIOLATION
    lines = [f"{'layer':<10} {'kind':<11} {'from':<16} {'out (C,H,W)':<16} {'params':>10}",
             f"{'input':<10} {'':<11} {'':<16} {str(tuple(shape)):<16}"]
    for r in rows:
        lines.append(f"{r['name']:<10} {r['kind']:<11} {','.join(r['inputs']):<16} {str(tuple(r['out_shape'])):<16} {r['params']:>10,}")
    if args.out:
        Path(args.out).write_text(json.dumps({"input_shape": shape, "layers": rows}, indent=2))
    print("\n".join(lines))
    return EXIT_OK


def cmd_flops(args) -> int:
    from .flops import count_flops
    from .model import build

    graph = _load_graph(args.config)
    shape = _input_shape(args.input_size, graph)
    rep = count_flops(build(graph, seed=args.seed), shape)
    _emit(rep.to_dict(include_ops=args.ops), "flops_report", args.out, rep.table())
    return EXIT_OK


def cmd_ablation_audit(args) -> int:
    from .flops import ablation_audit, audit_table

    graph = _load_graph(args.config)
    audit = ablation_audit(graph, _input_shape(args.input_size, graph), seed=args.seed)
    _emit(audit, "ablation_audit", args.out, audit_table(audit))
    return EXIT_OK if audit["passed"] else EXIT_VIOLATION


def cmd_gen_data(args) -> int:
    from .data import generate_dataset

    if not args.out:
        raise UsageError("gen-data needs --out DIR")
    if args.n_images < 1 or not 0 <= args.holdout < args.n_images:
        raise UsageError("need n_images >= 1 and 0 <= holdout < n_images")
    manifest = generate_dataset(args.out, args.n_images, args.seed, args.size, args.holdout, args.max_objects)
    validate(manifest, "dataset_manifest")
    n_obj = sum(len(r["objects"]) for r in manifest["images"])
    print(f"wrote {args.n_images} images ({args.holdout} held out), {n_obj} objects, to {args.out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .data import load_dataset
    from .metrics import serialize_predictions
    from .model import build
    from .train import TrainConfig, TrainingDivergedError, config_dict, evaluate_model, predict, train_toy

    data_dir = _require_dir(args.data, "dataset directory")
    if not (data_dir / "manifest.json").is_file():
        raise UsageError(f"{data_dir} has no manifest.json")
    if not args.out:
        raise UsageError("train-toy needs --out DIR")
    graph = _load_graph(args.config)
    train = load_dataset(data_dir, "train", dtype=T.default_dtype())
    test = load_dataset(data_dir, "test", dtype=T.default_dtype())
    if args.limit:
        train = train.subset(range(min(args.limit, len(train))))
    if tuple(train.images.shape[2:]) != tuple(graph.input_shape[1:]):
        raise UsageError(f"dataset images are {train.images.shape[2:]}, model expects {graph.input_shape[1:]}")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
                      patience=args.patience, seed=args.seed)
    model = build(graph, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        result = train_toy(model, train, cfg, log=None if args.quiet else print)
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_VIOLATION
    elapsed = time.perf_counter() - start
    result.write_csv(out / "loss.csv")
    cten.save_weights(out / "weights", result.best_state, {"best_epoch": result.best_epoch})
    summary = {"train": config_dict(cfg), "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
               "epochs_run": len(result.history), "stopped_early": result.stopped_early, "seconds": elapsed,
               "precision": T.precision_mode()}
    if len(test):
        preds_dir = out / "preds"
        preds_dir.mkdir(exist_ok=True)
        dets = predict(model, test.images, test.image_size)
        for stem, d in zip(test.stems, dets):
            (preds_dir / f"{stem}.txt").write_text(serialize_predictions(d))
        report = evaluate_model(model, test)
        validate(report.to_dict(), "metrics_report")
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
        summary["test_map50"] = report.map50
        summary["test_map50_95"] = report.map50_95
        print(f"test mAP50 {report.map50:.4f}  mAP50:95 {report.map50_95:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.4f}, {elapsed:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import LabelParseError, evaluate, parse_predictions, parse_yolo_labels

    preds_dir = _require_dir(args.preds, "predictions directory")
    labels_dir = _require_dir(args.labels, "labels directory")
    w, h = _image_wh(args.image_size)
    label_files = sorted(labels_dir.glob("*.txt"))
    if not label_files:
        raise UsageError(f"no *.txt label files in {labels_dir}")
    dets, gts = [], []
    for lf in label_files:
        try:
            gts.append(parse_yolo_labels(lf.read_text(), w, h))
            pf = preds_dir / lf.name
            dets.append(parse_predictions(pf.read_text()) if pf.is_file() else [])
        except LabelParseError as e:
            raise UsageError(f"{lf.name}: {e}") from None
    report = evaluate(dets, gts, num_classes=args.num_classes, iou_thr=args.iou)
    doc = report.to_dict()
    text = (f"images {report.num_images}  P {report.precision:.4f}  R {report.recall:.4f}  F1 {report.f1:.4f}  "
            f"mAP50 {report.map50:.4f}  mAP50:95 {report.map50_95:.4f}")
    _emit(doc, "metrics_report", args.out, text if args.out else None)
    return EXIT_OK


def _image_wh(spec: str) -> tuple[int, int]:
    try:
        parts = [int(v) for v in spec.lower().split("x")]
    except ValueError:
        raise UsageError(f"--image-size must look like 256 or 320x240 (W x H), got {spec!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise UsageError(f"--image-size must look like 256 or 320x240 (W x H), got {spec!r}")
    return parts[0], parts[1]


def cmd_bench(args) -> int:
    from .model import build

    if args.iterations < 1 or args.warmup < 0 or args.batch_size < 1:
        raise UsageError("need iterations >= 1, warmup >= 0, batch-size >= 1")
    graph = _load_graph(args.config)
    shape = _input_shape(args.input_size, graph)
    model = build(graph, seed=args.seed)
    x = T.Tensor(np.random.default_rng(args.seed).standard_normal((args.batch_size, *shape)))
    times = []
    with T.no_grad():
        for i in range(args.warmup + args.iterations):
            t0 = time.perf_counter()
            model(x)
            if i >= args.warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    ms = np.array(times)
    doc = {"input_shape": shape, "batch_size": args.batch_size, "iterations": args.iterations, "warmup": args.warmup,
           "precision": T.precision_mode(), "mean_ms": float(ms.mean()), "std_ms": float(ms.std()),
           "throughput": float(args.batch_size * 1e3 / ms.mean())}
    text = (f"{doc['precision']} batch {args.batch_size} input {shape}: {doc['mean_ms']:.2f} ± {doc['std_ms']:.2f} ms/forward, "
            f"{doc['throughput']:.1f} images/s")
    _emit(doc, "bench_report", args.out, text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="seed for weights and data (default 42)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--precision", choices=("verify64", "bench32"),
                        help="overrides COTTAD_PRECISION (default verify64; bench defaults to bench32)")
    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--config", help="model config JSON (default: shipped toy config)")
    model_opts.add_argument("--input-size", help="H or HxW (default: from config)")

    p = argparse.ArgumentParser(prog="cottad", description="Cott-ADNet building blocks: checks, audits, toy training")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    s.add_argument("--scope", choices=("primitives", "blocks", "all"), default="all")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("shapes", parents=[common, model_opts], help="layer-by-layer shape table")
    s.set_defaults(func=cmd_shapes)

    s = sub.add_parser("flops", parents=[common, model_opts], help="per-layer MACs/FLOPs/params")
    s.add_argument("--ops", action="store_true", help="include per-op records in the JSON")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("ablation-audit", parents=[common, model_opts], help="params/FLOPs of every ablation variant")
    s.set_defaults(func=cmd_ablation_audit)

    s = sub.add_parser("gen-data", parents=[common], help="write a seeded synthetic dataset")
    s.add_argument("--n-images", type=int, default=200)
    s.add_argument("--holdout", type=int, default=50, help="last N images form the test split")
    s.add_argument("--size", type=int, default=256, help="square image side in pixels")
    s.add_argument("--max-objects", type=int, default=4)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-toy", parents=[common], help="train the toy detector on a generated dataset")
    s.add_argument("--config", help="model config JSON (default: shipped toy config)")
    s.add_argument("--data", required=True, help="dataset directory from gen-data")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--weight-decay", type=float, default=5e-4)
    s.add_argument("--patience", type=int, default=50)
    s.add_argument("--limit", type=int, help="use only the first N training images")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval", parents=[common], help="score prediction files against YOLO labels")
    s.add_argument("--preds", required=True, help="directory of 'class conf x1 y1 x2 y2' files")
    s.add_argument("--labels", required=True, help="directory of YOLO label files")
    s.add_argument("--image-size", required=True, help="W or WxH in pixels")
    s.add_argument("--num-classes", type=int, default=4)
    s.add_argument("--iou", type=float, default=0.5, help="IoU threshold for counts and P/R/F1")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common, model_opts], help="forward-pass wall-clock timing")
    s.add_argument("--iterations", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--batch-size", type=int, default=1)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    mode = args.precision or os.environ.get("COTTAD_PRECISION") or ("bench32" if args.command == "bench" else "verify64")
    if mode not in T.PRECISION_MODES:
        print(f"cottad: COTTAD_PRECISION must be one of {T.PRECISION_MODES}, got {mode!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with T.precision(mode):
            return args.func(args)
    except UsageError as e:
        print(f"cottad {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
