"""Toy learning oracle: 200 synthetic images (50 held out), 100 epochs, verify64.

Writes results/toy_oracle.json plus the loss CSV and metrics of the run. The
mAP50 recorded here is what the acceptance threshold of 0.80 was checked against.
"""

import argparse
import csv
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from cottad.cli import main as cottad

ROOT = Path(__file__).resolve().parents[1]


def smoothed_ratio(train_losses, horizon=60, window=5):
    """Smoothed train loss at ``horizon`` epochs over the smoothed initial loss."""
    tr = np.asarray(train_losses[:horizon], dtype=float)
    k = min(window, tr.size)
    sm = np.convolve(tr, np.ones(k) / k, mode="valid")
    return float(sm[-1] / sm[0])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        data, run = Path(tmp) / "data", Path(tmp) / "run"
        rc = cottad(["gen-data", "--out", str(data), "--n-images", "200", "--holdout", "50", "--size", "64",
                     "--seed", str(args.seed), "--precision", "verify64"])
        if rc:
            return rc
        t0 = time.perf_counter()
        rc = cottad(["train-toy", "--data", str(data), "--out", str(run), "--epochs", str(args.epochs),
                     "--seed", str(args.seed), "--precision", "verify64", "--quiet"])
        if rc:
            return rc
        wall = time.perf_counter() - t0
        summary = json.loads((run / "summary.json").read_text())
        metrics = json.loads((run / "metrics.json").read_text())
        loss_csv = (run / "loss.csv").read_text()
    rows = list(csv.DictReader(loss_csv.splitlines()))
    record = {
        "dataset": {"images": 200, "holdout": 50, "size": 64, "seed": args.seed},
        "epochs_run": summary["epochs_run"],
        "best_epoch": summary["best_epoch"],
        "test_map50": metrics["map50"],
        "test_map50_95": metrics["map50_95"],
        "test_precision": metrics["precision"],
        "test_recall": metrics["recall"],
        "per_class_ap50": {c["name"]: c["ap"].get("0.50") for c in metrics["per_class"]},
        "smoothed_loss_ratio_60": smoothed_ratio([float(r["train_loss"]) for r in rows]),
        "train_seconds": wall,
    }
    (out / "toy_oracle.json").write_text(json.dumps(record, indent=2))
    (out / "toy_oracle_loss.csv").write_text(loss_csv)
    print(json.dumps(record, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
