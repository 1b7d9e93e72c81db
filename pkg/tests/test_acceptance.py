"""Acceptance criteria 1-10, one pass/fail line each.

Run under pytest (lines are printed in the terminal summary) or directly with
``python tests/test_acceptance.py``. Criterion 8 trains the toy model for 100
epochs and takes several minutes.
"""

import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cottad import gradsuite, tensor as T  # noqa: E402
from cottad.activations import nelu, nelu_grad  # noqa: E402
from cottad.blocks import ODConv, OdconvConfig, odconv_attention, pyramid_pool  # noqa: E402
from cottad.cli import main as cli_main  # noqa: E402
from cottad.data import render_scene  # noqa: E402
from cottad.flops import ablation_audit  # noqa: E402
from cottad.metrics import Box, Detection, GroundTruth, average_precision, match, prf1  # noqa: E402
from cottad.model import AblationVariant, ablate, build, reference_config  # noqa: E402
from cottad.tensor import Tensor  # noqa: E402
from cottad.train import build_targets, detection_loss  # noqa: E402

from oracles import brute_force_match, conv2d_loops, oracle_map  # noqa: E402

MAP50_TARGET = 0.80


def _quiet_cli(argv):
    with open(os.devnull, "w") as null:
        stdout, sys.stdout = sys.stdout, null
        try:
            return cli_main(argv)
        finally:
            sys.stdout = stdout


def nelu_points():
    got = [nelu(1.0), nelu(0.0), nelu(-1.0), nelu_grad(-1.0)]
    want = [1.0, -0.2, -0.1, -0.1]
    err = max(abs(g - w) for g, w in zip(got, want))
    return err < 1e-12, f"max abs err {err:.1e}"


def gradient_suite():
    start = time.perf_counter()
    with T.precision("verify64"):
        results = gradsuite.run_all("all", instances=20)
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_err for r in results)
    ok = all(r.instances >= 20 and r.max_rel_err < gradsuite.TOLERANCE for r in results) and elapsed < 120
    return ok, f"{len(results)} suites x 20, max rel err {worst:.1e}, {elapsed:.0f}s"


def lossless_downsampling():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, c = rng.integers(1, 3), rng.integers(1, 5)
        h, w = 2 * rng.integers(1, 9), 2 * rng.integers(1, 9)
        x = rng.standard_normal((n, c, h, w)) * 10.0 ** rng.integers(-3, 4)
        y = T.depth_to_space(T.space_to_depth(Tensor(x), 2), 2).data
        if y.tobytes() != x.tobytes():
            return False, f"mismatch at shape {x.shape}"
    return True, "100 tensors bitwise equal"


def pool_cascade():
    rng = np.random.default_rng(4)
    for _ in range(50):
        c, h, w = rng.integers(1, 4), rng.integers(1, 20), rng.integers(1, 20)
        x = Tensor(rng.standard_normal((1, c, h, w)))
        y = pyramid_pool(x, 5).data
        if not (np.array_equal(y[:, c:2 * c], T.maxpool2d(x, 5).data)
                and np.array_equal(y[:, 2 * c:3 * c], T.maxpool2d(x, 9).data)
                and np.array_equal(y[:, 3 * c:], T.maxpool2d(x, 13).data)):
            return False, f"mismatch at shape {x.shape}"
    return True, "50 tensors, 5/9/13 levels exactly equal"


def odconv_degeneracy():
    rng = np.random.default_rng(5)
    worst_conv = worst_alpha = 0.0
    for i in range(20):
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cfg = OdconvConfig(cin, cout, kernel_size=int(rng.choice([1, 3])), stride=int(rng.integers(1, 3)),
                           num_kernels=1, reduction=1)
        blk = ODConv(cfg, np.random.default_rng(i))
        x = Tensor(rng.standard_normal((2, cin, 6, 7)))
        geo = cfg.geometry
        want = conv2d_loops(x.data, blk.params["kernels"].data[0], None, geo.stride, geo.padding, 1, 1)
        got = blk(x).data
        worst_conv = max(worst_conv, float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300)))
        k = int(rng.integers(2, 7))
        cfg_k = OdconvConfig(4, 4, num_kernels=k, temperature=float(rng.uniform(0.1, 10)))
        alpha = odconv_attention(Tensor(rng.standard_normal((3, 4, 5, 5)) * 10), cfg_k,
                                 ODConv(cfg_k, np.random.default_rng(i)).params).data
        worst_alpha = max(worst_alpha, float(np.max(np.abs(alpha.sum(axis=1) - 1.0))))
    ok = worst_conv < 1e-6 and worst_alpha <= 1e-12
    return ok, f"K=1 rel err {worst_conv:.1e}, |sum(alpha) - 1| {worst_alpha:.1e}"


def flops_ordering():
    audit = ablation_audit(reference_config())
    pct = {r["variant"]: r["delta_pct"] for r in audit["rows"]}
    detail = ", ".join(f"{k} {v:+.2f}%" for k, v in pct.items() if k != "Full")
    return audit["passed"], detail


def _random_image(rng, classes=2):
    def box():
        x1, y1 = rng.integers(0, 9), rng.integers(0, 9)
        return Box(x1, y1, x1 + rng.integers(1, 7), y1 + rng.integers(1, 7))

    dets = [Detection(box(), int(rng.integers(classes)), float(rng.choice([0.1, 0.5, 0.9])))
            for _ in range(rng.integers(0, 5))]
    gts = [GroundTruth(box(), int(rng.integers(classes))) for _ in range(rng.integers(0, 4))]
    return dets, gts


def _tuples(dets, gts):
    d = [((x.box.x1, x.box.y1, x.box.x2, x.box.y2), x.class_id, x.confidence) for x in dets]
    g = [((x.box.x1, x.box.y1, x.box.x2, x.box.y2), x.class_id) for x in gts]
    return d, g


def metrics_oracle():
    rng = np.random.default_rng(7)
    cases = 0
    for _ in range(1000):
        thr = float(rng.choice([0.1, 0.3, 0.5, 0.75]))
        images = [_random_image(rng) for _ in range(rng.integers(1, 4))]
        for dets, gts in images:
            if match(dets, gts, thr).assignment != brute_force_match(*_tuples(dets, gts), thr):
                return False, f"match disagrees at case {cases}"
        tup = [_tuples(d, g) for d, g in images]
        want = oracle_map([t[0] for t in tup], [t[1] for t in tup], thr)
        got = average_precision([d for d, _ in images], [g for _, g in images], thr)
        if abs(got - want) > 1e-9:
            return False, f"AP {got} vs oracle {want} at case {cases}"
        cases += 1
    p = prf1(9, 1, 1)
    ok = all(abs(v - 0.9) < 1e-12 for v in p)
    return ok, f"{cases} cases agree, prf1(9,1,1) = {tuple(round(v, 12) for v in p)}"


def toy_learning(workdir=None):
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir or tmp)
        data, run = root / "data", root / "run"
        start = time.perf_counter()
        if _quiet_cli(["gen-data", "--out", str(data), "--n-images", "200", "--holdout", "50", "--size", "64",
                       "--seed", "42"]) != 0:
            return False, "gen-data failed"
        code = _quiet_cli(["train-toy", "--data", str(data), "--out", str(run), "--epochs", "100",
                           "--precision", "verify64", "--seed", "42", "--quiet"])
        elapsed = time.perf_counter() - start
        if code != 0:
            return False, f"train-toy exited {code}"
        summary = json.loads((run / "summary.json").read_text())
    m = summary["test_map50"]
    ok = m >= MAP50_TARGET and summary["epochs_run"] <= 100 and elapsed < 900
    return ok, f"mAP50 {m:.4f} (target {MAP50_TARGET}), best epoch {summary['best_epoch']}, {elapsed:.0f}s"


def _stem_negative(model, images):
    # bias below -sum|w| keeps every stem pre-activation negative for inputs in [0, 1]
    w = model.named_parameters()["stem.conv.weight"]
    b = -np.abs(w.data).reshape(w.shape[0], -1).sum(axis=1) - 1.0
    model.set_parameter("stem.conv.bias", Tensor(b, requires_grad=True))
    with T.no_grad():
        pre = T.conv2d(Tensor(images), w, Tensor(b), model.layers["stem"].geo)
    return float(pre.data.max())


def dying_relu_probe():
    graph = reference_config()
    scenes = [render_scene(9, i, 64) for i in range(2)]
    images = np.stack([s.image.transpose(2, 0, 1) / 255.0 for s in scenes])
    labels = [s.ground_truth() for s in scenes]
    norms = {}
    for variant in (AblationVariant.FULL, AblationVariant.REMOVE_NELU):
        model = build(ablate(graph, variant), seed=42)
        if _stem_negative(model, images) >= 0:
            return False, f"{variant.value}: stem pre-activations not all negative"
        x = Tensor(images, requires_grad=True)
        heads = model(x)
        loss, _ = detection_loss(heads[0], build_targets(labels, heads[0].shape[2:], (64, 64), 4))
        loss.backward()
        norms[variant] = float(np.linalg.norm(x.grad))
    nelu_n, relu_n = norms[AblationVariant.FULL], norms[AblationVariant.REMOVE_NELU]
    return nelu_n > 0 and relu_n == 0.0, f"input-grad L2: NeLU {nelu_n:.3e}, ReLU {relu_n!r}"


def determinism():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        _quiet_cli(["gen-data", "--out", str(root / "data"), "--n-images", "24", "--holdout", "4", "--size", "64",
                    "--seed", "3"])
        csvs = []
        for run in ("a", "b"):
            code = _quiet_cli(["train-toy", "--data", str(root / "data"), "--out", str(root / run), "--epochs", "3",
                               "--batch-size", "8", "--precision", "verify64", "--seed", "11", "--quiet"])
            if code != 0:
                return False, f"run {run} exited {code}"
            csvs.append((root / run / "loss.csv").read_bytes())
    return csvs[0] == csvs[1], f"loss.csv identical ({len(csvs[0])} bytes, 3 epochs)"


CRITERIA = [
    (1, "NeLU point values", nelu_points),
    (2, "gradient suite", gradient_suite),
    (3, "lossless downsampling", lossless_downsampling),
    (4, "pool-cascade equivalence", pool_cascade),
    (5, "ODConv degeneracy", odconv_degeneracy),
    (6, "FLOPs ablation ordering", flops_ordering),
    (7, "metrics oracle", metrics_oracle),
    (8, "toy learning", toy_learning),
    (9, "dying-ReLU probe", dying_relu_probe),
    (10, "determinism", determinism),
]


def _line(num, title, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {title}: {detail}"


@pytest.mark.parametrize("num, title, check", CRITERIA, ids=[f"c{n}" for n, _, _ in CRITERIA])
def test_criterion(num, title, check, acceptance_log):
    ok, detail = check()
    line = _line(num, title, ok, detail)
    acceptance_log.append(line)
    print(line)
    assert ok, line


if __name__ == "__main__":
    os.environ.setdefault("COTTAD_PRECISION", "verify64")
    failed = 0
    for num, title, check in CRITERIA:
        ok, detail = check()
        failed += not ok
        print(_line(num, title, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
