"""Params/FLOPs of every ablation variant on the toy config at 64x64 and 640x640."""

import sys
from pathlib import Path

from cottad.cli import main as cottad

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    rc = 0
    for size in ("64", "640"):
        print(f"-- input {size}x{size}")
        rc |= cottad(["ablation-audit", "--input-size", size, "--out", str(ROOT / "results" / f"ablation_audit_{size}.json")])
    sys.exit(rc)
