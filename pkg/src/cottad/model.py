"""Declarative toy detector graphs, their ablation counterparts, and decoding."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import tensor as T
from .activations import apply as activate, ACTIVATIONS
from .blocks import (
    DRFSPPF,
    NGAM,
    ODConv,
    SPDConv,
    SPPF,
    Block,
    DrfsppfConfig,
    NgamConfig,
    OdconvConfig,
    SpdconvConfig,
    SppfConfig,
    _kaiming,
)
from .metrics import Box, Detection, iou
from .tensor import ConvParams, Tensor


class ModelConfigError(ValueError):
    pass


class LayerKind(str, Enum):
    CONV = "Conv"
    ODCONV = "ODConv"
    SPDCONV = "SPDConv"
    DRFSPPF = "DRFSPPF"
    NGAM = "NGAM"
    SPPF = "SPPF"
    STD_BLOCK = "StdBlock"
    UPSAMPLE = "Upsample"
    CONCAT = "Concat"
    DETECT_HEAD = "DetectHead"


class AblationVariant(str, Enum):
    FULL = "Full"
    REMOVE_ODCONV = "RemoveODConv"
    REMOVE_SPDCONV = "RemoveSPDConv"
    REMOVE_DRFSPPF = "RemoveDRFSPPF"
    REMOVE_NGAM = "RemoveNGAM"
    REMOVE_NELU = "RemoveNeLU"


@dataclass
class LayerSpec:
    name: str
    kind: LayerKind
    inputs: list = field(default_factory=lambda: [-1])
    args: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "from": list(self.inputs), "args": dict(self.args)}


@dataclass
class ModelGraph:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec]
    taps: dict[str, str] = field(default_factory=dict)
    width_multiple: float = 1.0
    depth_multiple: float = 1.0

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelGraph":
        from .schemas import validate

        validate(doc, "model_config")
        layers = []
        for i, ld in enumerate(doc["layers"]):
            inputs = ld.get("from", [-1])
            if not isinstance(inputs, list):
                inputs = [inputs]
            try:
                kind = LayerKind(ld["kind"])
            except ValueError:
                raise ModelConfigError(f"layers[{i}]: unknown kind {ld['kind']!r}") from None
            layers.append(LayerSpec(ld.get("name", f"l{i}"), kind, inputs, dict(ld.get("args", {}))))
        graph = cls(
            name=doc.get("name", "model"),
            input_shape=tuple(doc["input_shape"]),
            num_classes=int(doc.get("num_classes", 4)),
            layers=layers,
            taps=dict(doc.get("taps", {})),
            width_multiple=float(doc.get("width_multiple", 1.0)),
            depth_multiple=float(doc.get("depth_multiple", 1.0)),
        )
        return graph.resolved()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "width_multiple": self.width_multiple,
            "depth_multiple": self.depth_multiple,
            "layers": [l.to_dict() for l in self.layers],
            "taps": dict(self.taps),
        }

    @classmethod
    def load(cls, path) -> "ModelGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def resolved(self) -> "ModelGraph":
        """Copy with every input reference rewritten to a layer name; checks acyclicity."""
        names: list[str] = []
        out = []
        for i, spec in enumerate(self.layers):
            if spec.name in names or spec.name == "input":
                raise ModelConfigError(f"layer {i}: duplicate name {spec.name!r}")
            refs = []
            for ref in spec.inputs:
                if isinstance(ref, int):
                    j = i + ref if ref < 0 else ref
                    if j == -1:
                        refs.append("input")
                        continue
                    if not 0 <= j < i:
                        raise ModelConfigError(f"layer '{spec.name}': input index {ref} does not refer to an earlier layer")
                    refs.append(names[j])
                elif ref == "input" or ref in names:
                    refs.append(ref)
                else:
                    raise ModelConfigError(f"layer '{spec.name}': input {ref!r} is not an earlier layer")
            names.append(spec.name)
            out.append(LayerSpec(spec.name, spec.kind, refs, dict(spec.args)))
        for tap, target in self.taps.items():
            if target not in names:
                raise ModelConfigError(f"tap {tap!r} refers to unknown layer {target!r}")
        return ModelGraph(self.name, tuple(self.input_shape), self.num_classes, out, dict(self.taps),
                          self.width_multiple, self.depth_multiple)

    def kinds(self) -> list[LayerKind]:
        return [l.kind for l in self.layers]


def reference_config() -> ModelGraph:
    """The shipped toy Cott-ADNet graph (widths 16/32/64/128, 64×64 input)."""
    text = resources.files("cottad").joinpath("configs/cott_adnet_toy.json").read_text()
    return ModelGraph.from_dict(json.loads(text))


def load_config(path=None) -> ModelGraph:
    return reference_config() if path is None else ModelGraph.load(path)


# -- layers ----------------------------------------------------------------------


class Layer:
    """One graph node: owns parameters and maps input tensors to an output."""

    def __init__(self, spec: LayerSpec, in_shapes: list[tuple], graph: ModelGraph, rng: np.random.Generator):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.blocks: dict[str, Block] = {}
        self.out_shape = self.setup(in_shapes, graph, rng)

    def setup(self, in_shapes, graph, rng) -> tuple:
        raise NotImplementedError

    def forward(self, inputs: list[Tensor]) -> Tensor:
        raise NotImplementedError

    def arg(self, key, default=None):
        return self.spec.args.get(key, default)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for bname, block in self.blocks.items():
            for k, v in block.params.items():
                out[f"{bname}.{k}"] = v
        return out

    def set_parameter(self, key: str, value: Tensor) -> None:
        if key in self.params:
            self.params[key] = value
            return
        bname, _, rest = key.partition(".")
        self.blocks[bname].params[rest] = value


def _width(graph: ModelGraph, c: int) -> int:
    if graph.width_multiple == 1.0:
        return int(c)
    return max(4, 4 * int(round(c * graph.width_multiple / 4)))


def _single(in_shapes, name) -> tuple:
    if len(in_shapes) != 1:
        raise ModelConfigError(f"layer '{name}': expects exactly one input, got {len(in_shapes)}")
    return in_shapes[0]


class ConvLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        cout = _width(graph, self.arg("out_channels"))
        k, s, g = int(self.arg("kernel", 3)), int(self.arg("stride", 1)), int(self.arg("groups", 1))
        self.act = self.arg("act", "silu")
        if self.act not in ACTIVATIONS:
            raise ModelConfigError(f"layer '{self.spec.name}': unknown activation {self.act!r}")
        try:
            self.geo = ConvParams.square(c, cout, k, s, groups=g)
            ho, wo = self.geo.out_size(h, w)
        except ValueError as e:
            raise ModelConfigError(f"layer '{self.spec.name}' (Conv): {e}") from None
        fan_in = (c // g) * k * k
        self.params["conv.weight"] = Tensor(_kaiming(rng, self.geo.weight_shape(), fan_in), requires_grad=True)
        self.params["conv.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        return (cout, ho, wo)

    def forward(self, inputs):
        y = T.conv2d(inputs[0], self.params["conv.weight"], self.params["conv.bias"], self.geo)
        with T.scope("act"):
            return activate(self.act, y)


class ODConvLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        cout = _width(graph, self.arg("out_channels"))
        self.act = self.arg("act", "silu")
        try:
            self.cfg = OdconvConfig(
                c, cout,
                kernel_size=int(self.arg("kernel", 3)),
                stride=int(self.arg("stride", 1)),
                groups=int(self.arg("groups", 1)),
                num_kernels=int(self.arg("num_kernels", 4)),
                reduction=int(self.arg("reduction", 4)),
                temperature=float(self.arg("temperature", 1.0)),
            )
            ho, wo = self.cfg.geometry.out_size(h, w)
        except ValueError as e:
            raise ModelConfigError(f"layer '{self.spec.name}' (ODConv): {e}") from None
        self.blocks["odconv"] = ODConv(self.cfg, rng)
        return (cout, ho, wo)

    def forward(self, inputs):
        y = self.blocks["odconv"](inputs[0])
        with T.scope("act"):
            return activate(self.act, y)


class SPDConvLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        cout = _width(graph, self.arg("out_channels"))
        scale = int(self.arg("scale", 2))
        self.act = self.arg("act", "silu")
        if h % scale or w % scale:
            raise ModelConfigError(f"layer '{self.spec.name}' (SPDConv): input {h}x{w} not divisible by scale {scale}")
        self.cfg = SpdconvConfig(c, cout, scale, int(self.arg("kernel", 1)))
        self.blocks["spdconv"] = SPDConv(self.cfg, rng)
        return (cout, h // scale, w // scale)

    def forward(self, inputs):
        y = self.blocks["spdconv"](inputs[0])
        with T.scope("act"):
            return activate(self.act, y)


class DRFSPPFLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        cout = _width(graph, self.arg("out_channels", c))
        try:
            self.cfg = DrfsppfConfig(c, cout, int(self.arg("large_kernel", 11)), int(self.arg("dilation", 3)),
                                     int(self.arg("pool_kernel", 5)))
        except ValueError as e:
            raise ModelConfigError(f"layer '{self.spec.name}' (DRFSPPF): {e}") from None
        self.blocks["drfsppf"] = DRFSPPF(self.cfg, rng)
        return (cout, h, w)

    def forward(self, inputs):
        return self.blocks["drfsppf"](inputs[0])


class SPPFLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        cout = _width(graph, self.arg("out_channels", c))
        self.cfg = SppfConfig(c, cout, int(self.arg("pool_kernel", 5)))
        self.blocks["sppf"] = SPPF(self.cfg, rng)
        return (cout, h, w)

    def forward(self, inputs):
        return self.blocks["sppf"](inputs[0])


class NGAMLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        try:
            self.cfg = NgamConfig(
                c,
                reduction=int(self.arg("reduction", 4)),
                gate_mode=self.arg("gate_mode", "ReplaceAll"),
                spatial_kernel=int(self.arg("spatial_kernel", 7)),
                activation=self.arg("activation", "nelu"),
                alpha=float(self.arg("alpha", 0.2)),
            )
        except ValueError as e:
            raise ModelConfigError(f"layer '{self.spec.name}' (NGAM): {e}") from None
        self.blocks["ngam"] = NGAM(self.cfg, rng)
        return (c, h, w)

    def forward(self, inputs):
        return self.blocks["ngam"](inputs[0])


class StdBlockLayer(Layer):
    """Stand-in for the YOLO C3k2/C2PSA blocks: n × (3×3 conv, act, 3×3 conv, residual add, act)."""

    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        self.repeats = max(1, int(round(int(self.arg("n", 1)) * graph.depth_multiple)))
        self.act = self.arg("act", "silu")
        self.geo = ConvParams.square(c, c, 3)
        for r in range(self.repeats):
            self.params[f"m{r}.conv1.weight"] = Tensor(_kaiming(rng, self.geo.weight_shape(), 9 * c), requires_grad=True)
            self.params[f"m{r}.conv1.bias"] = Tensor(np.zeros(c), requires_grad=True)
            # second conv starts small so each block begins close to identity
            self.params[f"m{r}.conv2.weight"] = Tensor(_kaiming(rng, self.geo.weight_shape(), 9 * c, gain=0.2), requires_grad=True)
            self.params[f"m{r}.conv2.bias"] = Tensor(np.zeros(c), requires_grad=True)
        return (c, h, w)

    def forward(self, inputs):
        x = inputs[0]
        p = self.params
        for r in range(self.repeats):
            y = activate(self.act, T.conv2d(x, p[f"m{r}.conv1.weight"], p[f"m{r}.conv1.bias"], self.geo))
            y = T.conv2d(y, p[f"m{r}.conv2.weight"], p[f"m{r}.conv2.bias"], self.geo)
            x = activate(self.act, T.add(x, y))
        return x


class UpsampleLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        self.scale = int(self.arg("scale", 2))
        return (c, h * self.scale, w * self.scale)

    def forward(self, inputs):
        return T.upsample_nearest(inputs[0], self.scale)


class ConcatLayer(Layer):
    def setup(self, in_shapes, graph, rng):
        hw = {s[1:] for s in in_shapes}
        if len(hw) != 1:
            raise ModelConfigError(f"layer '{self.spec.name}' (Concat): spatial sizes differ: {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]

    def forward(self, inputs):
        return T.concat(inputs, axis=1)


class DetectHeadLayer(Layer):
    """Anchor-free head: per cell [objectness, tx, ty, tw, th, class logits...]."""

    def setup(self, in_shapes, graph, rng):
        c, h, w = _single(in_shapes, self.spec.name)
        self.num_classes = graph.num_classes
        self.hidden_geo = ConvParams.square(c, c, 3)
        self.pred_geo = ConvParams.square(c, 5 + self.num_classes, 1)
        self.stride = (graph.input_shape[1] // h, graph.input_shape[2] // w)
        self.params["hidden.weight"] = Tensor(_kaiming(rng, self.hidden_geo.weight_shape(), 9 * c), requires_grad=True)
        self.params["hidden.bias"] = Tensor(np.zeros(c), requires_grad=True)
        self.params["pred.weight"] = Tensor(_kaiming(rng, self.pred_geo.weight_shape(), c, gain=0.1), requires_grad=True)
        bias = np.zeros(5 + self.num_classes)
        bias[0] = -4.0  # objectness prior ~0.018
        self.params["pred.bias"] = Tensor(bias, requires_grad=True)
        return (5 + self.num_classes, h, w)

    def forward(self, inputs):
        p = self.params
        y = T.silu(T.conv2d(inputs[0], p["hidden.weight"], p["hidden.bias"], self.hidden_geo))
        return T.conv2d(y, p["pred.weight"], p["pred.bias"], self.pred_geo)


LAYER_TYPES = {
    LayerKind.CONV: ConvLayer,
    LayerKind.ODCONV: ODConvLayer,
    LayerKind.SPDCONV: SPDConvLayer,
    LayerKind.DRFSPPF: DRFSPPFLayer,
    LayerKind.SPPF: SPPFLayer,
    LayerKind.NGAM: NGAMLayer,
    LayerKind.STD_BLOCK: StdBlockLayer,
    LayerKind.UPSAMPLE: UpsampleLayer,
    LayerKind.CONCAT: ConcatLayer,
    LayerKind.DETECT_HEAD: DetectHeadLayer,
}


# -- model ---------------------------------------------------------------------------


class Model:
    def __init__(self, graph: ModelGraph, layers: dict[str, Layer]):
        self.graph = graph
        self.layers = layers

    @property
    def heads(self) -> list[str]:
        return [n for n, l in self.layers.items() if l.spec.kind is LayerKind.DETECT_HEAD]

    def forward(self, x: Tensor) -> list[Tensor]:
        """Run the graph; returns the output of every DetectHead in order."""
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.graph.input_shape[0]:
            raise ValueError(f"model expects [N, {self.graph.input_shape[0]}, H, W] input, got {x.shape}")
        values: dict[str, Tensor] = {"input": x}
        for name, layer in self.layers.items():
            with T.scope(name):
                values[name] = layer.forward([values[r] for r in layer.spec.inputs])
        return [values[h] for h in self.heads]

    __call__ = forward

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers.items():
            for k, v in layer.named_parameters().items():
                out[f"{lname}.{k}"] = v
        return out

    def set_parameter(self, key: str, value: Tensor) -> None:
        lname, _, rest = key.partition(".")
        self.layers[lname].set_parameter(rest, value)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            self.set_parameter(k, Tensor(arr, requires_grad=True))

    def shape_table(self, input_shape=None) -> list[dict]:
        """Layer-by-layer output shapes from an actual forward pass (batch 1)."""
        c, h, w = input_shape or self.graph.input_shape
        rows = []
        values: dict[str, Tensor] = {"input": Tensor(np.zeros((1, c, h, w)))}
        with T.no_grad():
            for name, layer in self.layers.items():
                y = layer.forward([values[r] for r in layer.spec.inputs])
                values[name] = y
                rows.append({
                    "name": name,
                    "kind": layer.spec.kind.value,
                    "inputs": list(layer.spec.inputs),
                    "out_shape": list(y.shape[1:]),
                    "params": sum(p.size for p in layer.named_parameters().values()),
                })
        return rows

    def audit(self) -> None:
        """Forward shape audit at the declared input size."""
        for row in self.shape_table():
            declared = list(self.layers[row["name"]].out_shape)
            if row["out_shape"] != declared:
                raise ModelConfigError(f"layer '{row['name']}': forward shape {row['out_shape']} != declared {declared}")


def build(config, seed: int = 42, rng: np.random.Generator | None = None) -> Model:
    """Instantiate and shape-audit a model from a graph, dict or JSON path."""
    if isinstance(config, (str, Path)):
        graph = ModelGraph.load(config)
    elif isinstance(config, Mapping):
        graph = ModelGraph.from_dict(config)
    else:
        graph = config.resolved()
    rng = rng or np.random.default_rng(seed)
    shapes: dict[str, tuple] = {"input": tuple(graph.input_shape)}
    layers: dict[str, Layer] = {}
    with T.no_grad():
        for spec in graph.layers:
            in_shapes = [shapes[r] for r in spec.inputs]
            try:
                layer = LAYER_TYPES[spec.kind](spec, in_shapes, graph, rng)
            except ModelConfigError:
                raise
            except (ValueError, KeyError, TypeError) as e:
                raise ModelConfigError(f"layer '{spec.name}' ({spec.kind.value}): {e}") from None
            layers[spec.name] = layer
            shapes[spec.name] = tuple(layer.out_shape)
    if not any(s.kind is LayerKind.DETECT_HEAD for s in graph.layers):
        raise ModelConfigError("graph has no DetectHead layer")
    model = Model(graph, layers)
    model.audit()
    return model


def count_params(model: Model) -> int:
    return int(sum(p.size for p in model.named_parameters().values()))


# -- ablation ------------------------------------------------------------------------


def ablate(graph: ModelGraph, variant) -> ModelGraph:
    """Swap one novel module back to its baseline counterpart.

    ODConv -> dense standard conv with the same kernel/stride/channels;
    SPDConv -> stride-2 3×3 conv; DRFSPPF -> SPPF; NGAM -> removed (identity);
    RemoveNeLU -> ReLU activations and sigmoid gates wherever NeLU was used.
    """
    variant = AblationVariant(variant)
    g = copy.deepcopy(graph.resolved())
    if variant is AblationVariant.FULL:
        return g
    layers: list[LayerSpec] = []
    renamed: dict[str, str] = {}
    for spec in g.layers:
        spec.inputs = [renamed.get(r, r) for r in spec.inputs]
        a = spec.args
        if variant is AblationVariant.REMOVE_ODCONV and spec.kind is LayerKind.ODCONV:
            spec = LayerSpec(spec.name, LayerKind.CONV, spec.inputs, {
                "out_channels": a["out_channels"], "kernel": a.get("kernel", 3),
                "stride": a.get("stride", 1), "act": a.get("act", "silu"),
            })
        elif variant is AblationVariant.REMOVE_SPDCONV and spec.kind is LayerKind.SPDCONV:
            spec = LayerSpec(spec.name, LayerKind.CONV, spec.inputs, {
                "out_channels": a["out_channels"], "kernel": 3, "stride": a.get("scale", 2), "act": a.get("act", "silu"),
            })
        elif variant is AblationVariant.REMOVE_DRFSPPF and spec.kind is LayerKind.DRFSPPF:
            spec = LayerSpec(spec.name, LayerKind.SPPF, spec.inputs, {
                k: a[k] for k in ("out_channels", "pool_kernel") if k in a
            })
        elif variant is AblationVariant.REMOVE_NGAM and spec.kind is LayerKind.NGAM:
            renamed[spec.name] = spec.inputs[0]
            continue
        elif variant is AblationVariant.REMOVE_NELU:
            if spec.kind is LayerKind.NGAM:
                if a.get("activation", "nelu") == "nelu":
                    a["activation"] = "relu"
                if a.get("gate_mode", "ReplaceAll") == "ReplaceAll":
                    a["gate_mode"] = "KeepSigmoidGates"
            elif a.get("act") == "nelu":
                a["act"] = "relu"
        layers.append(spec)
    g.layers = layers
    g.taps = {k: renamed.get(v, v) for k, v in g.taps.items()}
    g.name = f"{graph.name}-{variant.value}"
    return g.resolved()


# -- decoding ------------------------------------------------------------------------


def _sigmoid(z):
    return T._sigmoid_np(np.asarray(z, dtype=np.float64))


def decode(head_outputs, conf_thr: float = 0.25, nms_iou: float = 0.5, image_size=None,
           strides=None) -> list[list[Detection]]:
    """Turn raw head maps into per-image detections (clamped, per-class greedy NMS).

    Box parameterisation per cell (gx, gy) of a G_h×G_w grid over an H×W image:
    cx = (gx + sigmoid(tx)) * W / G_w, w = sigmoid(tw) * W, likewise for y/h.
    Confidence = sigmoid(objectness) * max class probability.
    """
    if isinstance(head_outputs, (Tensor, np.ndarray)):
        head_outputs = [head_outputs]
    maps = [np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64) for h in head_outputs]
    n = maps[0].shape[0]
    results: list[list[Detection]] = [[] for _ in range(n)]
    for m in maps:
        _, ch, gh, gw = m.shape
        img_h, img_w = image_size if image_size is not None else (gh * 8, gw * 8)
        obj = _sigmoid(m[:, 0])
        box = _sigmoid(m[:, 1:5])
        logits = m[:, 5:]
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        cls = probs.argmax(axis=1)
        conf = obj * probs.max(axis=1)
        gy, gx = np.mgrid[0:gh, 0:gw]
        cx = (gx + box[:, 0]) * img_w / gw
        cy = (gy + box[:, 1]) * img_h / gh
        bw = box[:, 2] * img_w
        bh = box[:, 3] * img_h
        for b in range(n):
            keep = np.argwhere(conf[b] >= conf_thr)
            for iy, ix in keep:
                x1 = float(np.clip(cx[b, iy, ix] - bw[b, iy, ix] / 2, 0, img_w))
                x2 = float(np.clip(cx[b, iy, ix] + bw[b, iy, ix] / 2, 0, img_w))
                y1 = float(np.clip(cy[b, iy, ix] - bh[b, iy, ix] / 2, 0, img_h))
                y2 = float(np.clip(cy[b, iy, ix] + bh[b, iy, ix] / 2, 0, img_h))
                if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
                    continue
                results[b].append(Detection(Box(x1, y1, x2, y2), int(cls[b, iy, ix]), float(conf[b, iy, ix])))
    return [nms(d, nms_iou) for d in results]


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression, highest confidence first."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) < iou_thr for k in kept):
            kept.append(d)
    return kept
