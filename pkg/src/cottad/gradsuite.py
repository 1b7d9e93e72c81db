"""Finite-difference gradient suites over every primitive and every block.

Each suite draws random instances (shapes, geometry, values and weights) and
compares reverse-mode gradients of a random projection of the output against
central differences. Instances with any input within ``KINK_MARGIN`` of a
non-differentiable point (NeLU jump, ReLU/abs corner, max-pool near-tie) are
redrawn, since a difference quotient there measures the jump, not a slope.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import tensor as T
from .activations import NeluParams, nelu
from .blocks import (
    DrfsppfConfig, GateMode, NgamConfig, OdconvConfig, SppfConfig, SpdconvConfig,
    drfsppf_forward, ngam_forward, odconv_forward, odconv_forward_literal, sppf_forward, spdconv_forward,
)
from .tensor import ConvParams, Tensor

KINK_MARGIN = 1e-3
TOLERANCE = 1e-4
MAX_ATTEMPTS_FACTOR = 20

Instance = tuple[Callable[..., Tensor], list[np.ndarray]]


@dataclass
class SuiteResult:
    name: str
    group: str
    instances: int
    rejected: int
    max_rel_err: float
    seconds: float
    passed: bool


def _randn(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


# -- primitives ---------------------------------------------------------------------


def _conv(rng) -> Instance:
    g = int(rng.choice([1, 2]))
    cin, cout = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3]))
    stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pad = tuple(int(v) for v in rng.integers(0, 2, size=4))
    p = ConvParams(cin, cout, k, k, stride, pad, dil, g)
    h = int(rng.integers(dil * (k - 1) + 1, 7))
    x = _randn(rng, int(rng.integers(1, 3)), cin, h, h)
    return (lambda x, w, b: T.conv2d(x, w, b, p)), [x, _randn(rng, *p.weight_shape()), _randn(rng, cout)]


def _conv_per_sample(rng) -> Instance:
    n, cin, cout, k = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3)), 3
    p = ConvParams.square(cin, cout, k, stride=int(rng.integers(1, 3)))
    return (lambda x, w: T.conv2d(x, w, None, p)), [_randn(rng, n, cin, 5, 5), _randn(rng, n, cout, cin, k, k)]


def _depthwise(rng) -> Instance:
    c = int(rng.integers(1, 4))
    kh, kw = int(rng.choice([1, 3])), int(rng.choice([1, 3, 5]))
    dil = int(rng.integers(1, 3))
    p = ConvParams(c, c, kh, kw, 1, (dil * (kh // 2),) * 2 + (dil * (kw // 2),) * 2, dil, c)
    return (lambda x, w, b: T.depthwise_conv2d(x, w, b, p)), [_randn(rng, 1, c, 6, 6), _randn(rng, c, 1, kh, kw), _randn(rng, c)]


def _maxpool(rng) -> Instance:
    k = int(rng.choice([3, 5]))
    s = int(rng.integers(1, 3))
    return (lambda x: T.maxpool2d(x, k, s)), [_randn(rng, 1, 2, 6, 6)]


def _concat(rng) -> Instance:
    shapes = [(1, int(rng.integers(1, 4)), 3, 3) for _ in range(3)]
    return (lambda a, b, c: T.concat([a, b, c], 1)), [_randn(rng, *s) for s in shapes]


def _narrow(rng) -> Instance:
    c = int(rng.integers(2, 6))
    start = int(rng.integers(0, c - 1))
    length = int(rng.integers(1, c - start + 1))
    return (lambda x: T.narrow(x, 1, start, length)), [_randn(rng, 2, c, 3, 3)]


def _s2d(rng) -> Instance:
    s = int(rng.choice([2, 3]))
    return (lambda x: T.space_to_depth(x, s)), [_randn(rng, 1, 2, 2 * s, s)]


def _d2s(rng) -> Instance:
    s = int(rng.choice([2, 3]))
    return (lambda x: T.depth_to_space(x, s)), [_randn(rng, 1, 2 * s * s, 2, 3)]


def _upsample(rng) -> Instance:
    s = int(rng.choice([2, 3]))
    return (lambda x: T.upsample_nearest(x, s)), [_randn(rng, 1, 2, 3, 2)]


def _gap(rng) -> Instance:
    return T.global_avg_pool, [_randn(rng, 2, 3, int(rng.integers(1, 5)), 4)]


def _reshape(rng) -> Instance:
    return (lambda x: T.reshape(x, (2, -1))), [_randn(rng, 2, 3, 2, 2)]


def _permute(rng) -> Instance:
    axes = tuple(int(a) for a in rng.permutation(4))
    return (lambda x: T.permute(x, axes)), [_randn(rng, 2, 3, 2, 4)]


def _linear(rng) -> Instance:
    din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    return T.linear, [_randn(rng, 2, 3, din), _randn(rng, dout, din), _randn(rng, dout)]


def _broadcast_shape(rng, shape):
    kind = int(rng.integers(0, 3))
    return shape if kind == 0 else (shape[0], shape[1], 1, 1) if kind == 1 else (shape[0], 1, 1, 1)


def _add(rng) -> Instance:
    shape = (2, 3, 3, 3)
    return T.add, [_randn(rng, *shape), _randn(rng, *_broadcast_shape(rng, shape))]


def _mul(rng) -> Instance:
    shape = (2, 3, 3, 3)
    return T.mul, [_randn(rng, *shape), _randn(rng, *_broadcast_shape(rng, shape))]


def _sum(rng) -> Instance:
    axis = int(rng.integers(0, 4))
    return (lambda x: T.sum_(x, axis)), [_randn(rng, 2, 3, 2, 2)]


def _mean(rng) -> Instance:
    axis = None if rng.random() < 0.3 else int(rng.integers(0, 4))
    return (lambda x: T.mean(x, axis)), [_randn(rng, 2, 3, 2, 2)]


def _unary(fn) -> Callable:
    return lambda rng: (fn, [_randn(rng, 2, 3, 3, 2, scale=2.0)])


def _softmax_like(fn) -> Callable:
    def make(rng):
        axis = int(rng.integers(1, 4))
        return (lambda x: fn(x, axis)), [_randn(rng, 2, 3, 3, 2, scale=2.0)]
    return make


def _nelu(rng) -> Instance:
    p = NeluParams(float(rng.uniform(0.05, 1.0)))
    return (lambda x: nelu(x, p)), [_randn(rng, 2, 3, 3, 2, scale=2.0)]


PRIMITIVES: dict[str, Callable[[np.random.Generator], Instance]] = {
    "conv2d": _conv,
    "conv2d_per_sample": _conv_per_sample,
    "depthwise_conv2d": _depthwise,
    "maxpool2d": _maxpool,
    "concat": _concat,
    "narrow": _narrow,
    "space_to_depth": _s2d,
    "depth_to_space": _d2s,
    "upsample_nearest": _upsample,
    "global_avg_pool": _gap,
    "reshape": _reshape,
    "permute": _permute,
    "linear": _linear,
    "add": _add,
    "mul": _mul,
    "sum": _sum,
    "mean": _mean,
    "sigmoid": _unary(T.sigmoid),
    "relu": _unary(T.relu),
    "silu": _unary(T.silu),
    "softplus": _unary(T.softplus),
    "abs": _unary(T.abs_),
    "softmax": _softmax_like(T.softmax),
    "log_softmax": _softmax_like(T.log_softmax),
    "nelu": _nelu,
}


# -- blocks -------------------------------------------------------------------------


def _block(forward, cfg, x: np.ndarray, rng, scale=0.5) -> Instance:
    names = list(cfg.weight_shapes())
    weights = [_randn(rng, *cfg.weight_shapes()[n], scale=scale) for n in names]

    def f(x, *ws):
        return forward(x, cfg, dict(zip(names, ws)))

    return f, [x] + weights


def _ngam(mode: GateMode):
    def make(rng):
        c = int(rng.choice([2, 4]))
        cfg = NgamConfig(c, reduction=2, gate_mode=mode, spatial_kernel=int(rng.choice([3, 5])),
                         alpha=float(rng.uniform(0.1, 0.5)))
        return _block(ngam_forward, cfg, _randn(rng, 1, c, 4, 4), rng)
    return make


def _drfsppf(rng) -> Instance:
    cfg = DrfsppfConfig(2, int(rng.integers(1, 4)), large_kernel=int(rng.choice([5, 7])), dilation=2)
    return _block(drfsppf_forward, cfg, _randn(rng, 1, 2, 5, 5), rng)


def _odconv(rng) -> Instance:
    g = int(rng.choice([1, 2]))
    cfg = OdconvConfig(2 * g, 2 * g, kernel_size=int(rng.choice([1, 3])), stride=int(rng.integers(1, 3)),
                       groups=g, num_kernels=int(rng.integers(1, 5)), reduction=2,
                       temperature=float(rng.uniform(0.5, 2.0)))
    return _block(odconv_forward, cfg, _randn(rng, 2, 2 * g, 5, 5), rng)


def _odconv_literal(rng) -> Instance:
    cfg = OdconvConfig(2, 3, kernel_size=3, num_kernels=int(rng.integers(1, 4)), reduction=2)
    return _block(odconv_forward_literal, cfg, _randn(rng, 2, 2, 4, 4), rng)


def _spdconv(rng) -> Instance:
    cfg = SpdconvConfig(2, int(rng.integers(1, 4)), scale=int(rng.choice([2, 3])), kernel_size=int(rng.choice([1, 3])))
    return _block(spdconv_forward, cfg, _randn(rng, 1, 2, 6, 6), rng)


def _sppf(rng) -> Instance:
    cfg = SppfConfig(2, int(rng.integers(1, 4)))
    return _block(sppf_forward, cfg, _randn(rng, 1, 2, 5, 5), rng)


BLOCKS: dict[str, Callable[[np.random.Generator], Instance]] = {
    "ngam_replace_all": _ngam(GateMode.REPLACE_ALL),
    "ngam_keep_sigmoid_gates": _ngam(GateMode.KEEP_SIGMOID_GATES),
    "drfsppf": _drfsppf,
    "odconv": _odconv,
    "odconv_literal": _odconv_literal,
    "spdconv": _spdconv,
    "sppf": _sppf,
}


# -- runner ---------------------------------------------------------------------------


def near_kink(f: Callable[..., Tensor], arrays: list[np.ndarray], margin: float = KINK_MARGIN) -> bool:
    with T.no_grad(), T.track_kinks() as kinks:
        f(*[Tensor(a) for a in arrays])
    return any(d < margin for d in kinks.values())


def check_instance(f: Callable[..., Tensor], arrays: list[np.ndarray], rng: np.random.Generator) -> float:
    """Max relative error over all inputs for a random projection of ``f``'s output."""
    with T.no_grad():
        out_shape = f(*[Tensor(a) for a in arrays]).shape
    proj = rng.standard_normal(out_shape)

    def projected(*xs):
        return T.mul(f(*xs), Tensor(proj))

    return max(T.gradcheck(projected, [Tensor(a) for a in arrays]))


def run_suite(name: str, group: str, make, instances: int = 20, seed: int = 0,
              tol: float = TOLERANCE) -> SuiteResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    done = rejected = 0
    worst = 0.0
    with T.precision("verify64"):
        while done < instances:
            if rejected > MAX_ATTEMPTS_FACTOR * instances:
                raise RuntimeError(f"{name}: too many instances rejected near kinks ({rejected})")
            f, arrays = make(rng)
            if near_kink(f, arrays):
                rejected += 1
                continue
            worst = max(worst, check_instance(f, arrays, rng))
            done += 1
    return SuiteResult(name, group, done, rejected, worst, time.perf_counter() - start, worst < tol)


def run_all(scope: str = "all", instances: int = 20, seed: int = 0, tol: float = TOLERANCE) -> list[SuiteResult]:
    if scope not in ("primitives", "blocks", "all"):
        raise ValueError(f"scope must be primitives, blocks or all; got {scope!r}")
    groups = []
    if scope in ("primitives", "all"):
        groups.append(("primitives", PRIMITIVES))
    if scope in ("blocks", "all"):
        groups.append(("blocks", BLOCKS))
    return [run_suite(n, g, make, instances, seed, tol) for g, suites in groups for n, make in suites.items()]


def report(results: list[SuiteResult], scope: str, tol: float = TOLERANCE) -> dict:
    return {
        "scope": scope,
        "tolerance": tol,
        "precision": "verify64",
        "suites": [
            {k: v for k, v in asdict(r).items() if k in ("name", "group", "instances", "rejected", "max_rel_err", "seconds", "passed")}
            for r in results
        ],
        "passed": all(r.passed for r in results),
    }
