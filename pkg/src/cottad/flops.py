"""Per-layer FLOPs / parameter accounting.

Counts come from instrumenting an actual batch-1 forward pass, so they track
what the implementation executes. Convention:

* conv:   MACs = kh * kw * (Cin / groups) * Cout * H' * W'
* linear: MACs = Din * Dout per row
* FLOPs = 2 * MACs for those; pooling, elementwise and activation ops cost
  1 FLOP per output element; reshapes, concatenation and upsampling are free.
  Bias additions are not counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .model import AblationVariant, Model, ModelGraph, ablate, build, count_params
from .tensor import Tensor

MAC_OPS = ("conv", "linear")


@dataclass
class OpCost:
    path: str
    op: str
    macs: int
    flops: int
    out_shape: list[int]


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    flops: int
    params: int


@dataclass
class FlopsReport:
    input_shape: list[int]
    layers: list[LayerCost]
    ops: list[OpCost] = field(default_factory=list)
    total_macs: int = 0
    total_flops: int = 0
    total_params: int = 0

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self, include_ops: bool = False) -> dict:
        d = asdict(self)
        if not include_ops:
            d.pop("ops")
        d["gflops"] = self.gflops
        return d

    def table(self) -> str:
        lines = [f"{'layer':<10} {'kind':<11} {'MACs':>12} {'FLOPs':>12} {'params':>10}"]
        for l in self.layers:
            lines.append(f"{l.name:<10} {l.kind:<11} {l.macs:>12,} {l.flops:>12,} {l.params:>10,}")
        lines.append(f"{'total':<22} {self.total_macs:>12,} {self.total_flops:>12,} {self.total_params:>10,}")
        lines.append(f"input {self.input_shape}, {self.gflops:.6f} GFLOPs")
        return "\n".join(lines)


def op_flops(macs: int, ops: int) -> int:
    return 2 * macs + ops


def count_flops(model: Model, input_shape=None) -> FlopsReport:
    """Profile one forward pass at ``input_shape`` (C, H, W), batch 1."""
    shape = tuple(input_shape or model.graph.input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    x = Tensor(np.zeros((1,) + shape))
    with T.no_grad(), T.profile() as records:
        model.forward(x)
    ops = [OpCost(r.path, r.op, r.macs, op_flops(r.macs, r.ops), list(r.out_shape[1:])) for r in records]
    layers = []
    for name, layer in model.layers.items():
        mine = [o for o in ops if o.path == name or o.path.startswith(name + ".")]
        layers.append(LayerCost(
            name,
            layer.spec.kind.value,
            sum(o.macs for o in mine),
            sum(o.flops for o in mine),
            sum(p.size for p in layer.named_parameters().values()),
        ))
    return FlopsReport(
        input_shape=list(shape),
        layers=layers,
        ops=ops,
        total_macs=sum(l.macs for l in layers),
        total_flops=sum(l.flops for l in layers),
        total_params=sum(l.params for l in layers),
    )


# -- ablation audit ----------------------------------------------------------------

# expected sign pattern of FLOPs across variants
ORDERING = (
    AblationVariant.REMOVE_NGAM,
    AblationVariant.REMOVE_DRFSPPF,
    AblationVariant.FULL,
    AblationVariant.REMOVE_ODCONV,
    AblationVariant.REMOVE_SPDCONV,
)
NELU_TOLERANCE = 0.01


def ablation_audit(graph: ModelGraph, input_shape=None, seed: int = 42) -> dict:
    """Params and FLOPs of every ablation variant, with the ordering checks."""
    graph = graph.resolved()
    shape = list(input_shape or graph.input_shape)
    flops: dict[AblationVariant, int] = {}
    rows = []
    for variant in AblationVariant:
        model = build(ablate(graph, variant), seed=seed)
        rep = count_flops(model, shape)
        flops[variant] = rep.total_flops
        rows.append({"variant": variant.value, "params": count_params(model), "flops": rep.total_flops})
    full = flops[AblationVariant.FULL]
    for r in rows:
        r["delta_flops"] = r["flops"] - full
        r["delta_pct"] = 100.0 * r["delta_flops"] / full
    checks = [
        {
            "name": f"FLOPs({a.value}) < FLOPs({b.value})",
            "passed": flops[a] < flops[b],
        }
        for a, b in zip(ORDERING, ORDERING[1:])
    ]
    nelu_rel = abs(flops[AblationVariant.REMOVE_NELU] - full) / full
    checks.append({"name": f"|FLOPs(RemoveNeLU) - FLOPs(Full)| / FLOPs(Full) < {NELU_TOLERANCE:g}",
                   "passed": nelu_rel < NELU_TOLERANCE, "value": nelu_rel})
    return {"input_shape": shape, "rows": rows, "checks": checks, "passed": all(c["passed"] for c in checks)}


def audit_table(audit: dict) -> str:
    lines = [f"{'variant':<15} {'params':>10} {'FLOPs':>14} {'delta':>13} {'delta %':>8}"]
    for r in audit["rows"]:
        lines.append(f"{r['variant']:<15} {r['params']:>10,} {r['flops']:>14,} {r['delta_flops']:>+13,} {r['delta_pct']:>+7.2f}%")
    for c in audit["checks"]:
        lines.append(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}")
    return "\n".join(lines)
