"""The four detector building blocks (NGAM, DRFSPPF, ODConv, SPDConv) and SPPF.

Each block is a pure forward function ``*_forward(x, cfg, weights)`` over a
name -> Tensor mapping, plus a thin class that owns a config and initialised
weights. None of the blocks contains normalisation layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from . import tensor as T
from .activations import NeluParams, apply as activate, nelu
from .tensor import ConvParams, Tensor


class BlockConfigError(ValueError):
    pass


def _kaiming(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0 ** 0.5) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class Block:
    """Holds a config and a flat dict of named parameter tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            self.params[k] = Tensor(arr, requires_grad=True, name=k)

    def zero_(self) -> None:
        for k in self.params:
            self.params[k] = Tensor(np.zeros(self.params[k].shape), requires_grad=True, name=k)


# -- NGAM ----------------------------------------------------------------------


class GateMode(str, Enum):
    REPLACE_ALL = "ReplaceAll"
    KEEP_SIGMOID_GATES = "KeepSigmoidGates"


@dataclass(frozen=True)
class NgamConfig:
    channels: int
    reduction: int = 4
    gate_mode: GateMode = GateMode.REPLACE_ALL
    spatial_kernel: int = 7
    activation: str = "nelu"  # hidden activations; "relu" restores the plain GAM
    alpha: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "gate_mode", GateMode(self.gate_mode))
        if self.channels < 1 or self.reduction < 1 or self.channels % self.reduction:
            raise BlockConfigError(f"NGAM channels {self.channels} must be divisible by reduction {self.reduction}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise BlockConfigError(f"NGAM spatial_kernel must be odd, got {self.spatial_kernel}")
        if self.activation not in ("nelu", "relu"):
            raise BlockConfigError(f"NGAM activation must be 'nelu' or 'relu', got {self.activation!r}")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h, k = self.channels, self.hidden, self.spatial_kernel
        return {
            "channel.fc1.weight": (h, c),
            "channel.fc1.bias": (h,),
            "channel.fc2.weight": (c, h),
            "channel.fc2.bias": (c,),
            "spatial.conv1.weight": (h, c, k, k),
            "spatial.conv1.bias": (h,),
            "spatial.conv2.weight": (c, h, k, k),
            "spatial.conv2.bias": (c,),
        }


def _ngam_gate(z: Tensor, cfg: NgamConfig) -> Tensor:
    if cfg.gate_mode is GateMode.KEEP_SIGMOID_GATES:
        return T.sigmoid(z)
    return nelu(z, NeluParams(cfg.alpha))


def ngam_forward(x: Tensor, cfg: NgamConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Channel attention (per-pixel MLP over channels) then spatial attention (two k×k convs)."""
    if x.shape[1] != cfg.channels:
        raise ValueError(f"NGAM expects {cfg.channels} channels, got {x.shape[1]}")
    nelu_params = NeluParams(cfg.alpha)
    k = cfg.spatial_kernel
    with T.scope("channel"):
        z = T.permute(x, (0, 2, 3, 1))
        z = T.linear(z, weights["channel.fc1.weight"], weights["channel.fc1.bias"])
        z = activate(cfg.activation, z, nelu_params)
        z = T.linear(z, weights["channel.fc2.weight"], weights["channel.fc2.bias"])
        channel_gate = _ngam_gate(T.permute(z, (0, 3, 1, 2)), cfg)
        x1 = T.mul(x, channel_gate)
    with T.scope("spatial"):
        p1 = ConvParams.square(cfg.channels, cfg.hidden, k)
        p2 = ConvParams.square(cfg.hidden, cfg.channels, k)
        s = T.conv2d(x1, weights["spatial.conv1.weight"], weights["spatial.conv1.bias"], p1)
        s = activate(cfg.activation, s, nelu_params)
        s = T.conv2d(s, weights["spatial.conv2.weight"], weights["spatial.conv2.bias"], p2)
        return T.mul(x1, _ngam_gate(s, cfg))


class NGAM(Block):
    """NeLU-gated global attention.

    Final-layer biases of both branches start at ``gate_bias`` so the gates
    begin near identity (NeLU(1) = 1) instead of at NeLU(0) = -alpha.
    """

    def __init__(self, cfg: NgamConfig, rng: np.random.Generator | None = None, gate_bias: float = 1.0):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        shapes = cfg.weight_shapes()
        c, h, k = cfg.channels, cfg.hidden, cfg.spatial_kernel
        self._add("channel.fc1.weight", _kaiming(rng, shapes["channel.fc1.weight"], c))
        self._add("channel.fc1.bias", np.zeros(h))
        self._add("channel.fc2.weight", _kaiming(rng, shapes["channel.fc2.weight"], h, gain=0.1))
        self._add("channel.fc2.bias", np.full(c, gate_bias))
        self._add("spatial.conv1.weight", _kaiming(rng, shapes["spatial.conv1.weight"], c * k * k))
        self._add("spatial.conv1.bias", np.zeros(h))
        self._add("spatial.conv2.weight", _kaiming(rng, shapes["spatial.conv2.weight"], h * k * k, gain=0.1))
        self._add("spatial.conv2.bias", np.full(c, gate_bias))

    def forward(self, x):
        return ngam_forward(x, self.cfg, self.params)


# -- DRFSPPF -------------------------------------------------------------------


def largest_odd_at_most(value: float) -> int:
    m = int(np.floor(value))
    return m if m % 2 == 1 else m - 1


@dataclass(frozen=True)
class DrfsppfConfig:
    in_channels: int
    out_channels: int
    large_kernel: int = 11
    dilation: int = 3
    pool_kernel: int = 5  # cascaded three times: effective 5, 9, 13

    def __post_init__(self):
        if self.large_kernel < 1 or self.large_kernel % 2 == 0:
            raise BlockConfigError(f"DRFSPPF large_kernel must be odd, got {self.large_kernel}")
        if self.dilation < 1:
            raise BlockConfigError(f"DRFSPPF dilation must be >= 1, got {self.dilation}")
        if self.dilated_kernel < 1:
            raise BlockConfigError(
                f"DRFSPPF: no odd kernel fits large_kernel/dilation = {self.large_kernel}/{self.dilation}"
            )
        if self.pool_kernel % 2 == 0:
            raise BlockConfigError("DRFSPPF pool_kernel must be odd")

    @property
    def directional_kernel(self) -> int:
        """Length of the undilated 1×k / k×1 pair: 2d - 1."""
        return 2 * self.dilation - 1

    @property
    def dilated_kernel(self) -> int:
        """Length of the dilated pair: largest odd integer <= large_kernel / dilation."""
        return largest_odd_at_most(self.large_kernel / self.dilation)

    @property
    def pooled_channels(self) -> int:
        return 4 * self.in_channels

    def directional_params(self) -> dict[str, ConvParams]:
        c4, a, m, d = self.pooled_channels, self.directional_kernel, self.dilated_kernel, self.dilation
        return {
            "dw_h": ConvParams(c4, c4, 1, a, padding=(0, (a - 1) // 2), groups=c4),
            "dw_v": ConvParams(c4, c4, a, 1, padding=((a - 1) // 2, 0), groups=c4),
            "ddw_h": ConvParams(c4, c4, 1, m, padding=(0, d * (m - 1) // 2), dilation=d, groups=c4),
            "ddw_v": ConvParams(c4, c4, m, 1, padding=(d * (m - 1) // 2, 0), dilation=d, groups=c4),
        }

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name, p in self.directional_params().items():
            shapes[f"{name}.weight"] = p.weight_shape()
            shapes[f"{name}.bias"] = (p.out_channels,)
        shapes["fuse.weight"] = (self.in_channels, self.pooled_channels, 1, 1)
        shapes["fuse.bias"] = (self.in_channels,)
        shapes["proj.weight"] = (self.out_channels, self.in_channels, 1, 1)
        shapes["proj.bias"] = (self.out_channels,)
        return shapes


def pyramid_pool(x: Tensor, pool_kernel: int = 5) -> Tensor:
    """concat(x, p(x), p(p(x)), p(p(p(x)))) with stride-1 same-size max pools."""
    y1 = T.maxpool2d(x, pool_kernel)
    y2 = T.maxpool2d(y1, pool_kernel)
    y3 = T.maxpool2d(y2, pool_kernel)
    return T.concat([x, y1, y2, y3], axis=1)


def drfsppf_forward(x: Tensor, cfg: DrfsppfConfig, weights: Mapping[str, Tensor]) -> Tensor:
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"DRFSPPF expects {cfg.in_channels} channels, got {x.shape[1]}")
    dp = cfg.directional_params()
    with T.scope("pool"):
        f = pyramid_pool(x, cfg.pool_kernel)
    with T.scope("dconv"):
        f = T.conv2d(f, weights["dw_h.weight"], weights["dw_h.bias"], dp["dw_h"])
        f = T.conv2d(f, weights["dw_v.weight"], weights["dw_v.bias"], dp["dw_v"])
    with T.scope("ddconv"):
        f = T.conv2d(f, weights["ddw_h.weight"], weights["ddw_h.bias"], dp["ddw_h"])
        f = T.conv2d(f, weights["ddw_v.weight"], weights["ddw_v.bias"], dp["ddw_v"])
    with T.scope("recalibrate"):
        fuse = ConvParams(cfg.pooled_channels, cfg.in_channels, 1, 1)
        f = T.mul(T.conv2d(f, weights["fuse.weight"], weights["fuse.bias"], fuse), x)
    with T.scope("proj"):
        proj = ConvParams(cfg.in_channels, cfg.out_channels, 1, 1)
        return T.conv2d(f, weights["proj.weight"], weights["proj.bias"], proj)


class DRFSPPF(Block):
    """Pyramid pooling, separable large-kernel and dilated depthwise convs, Hadamard recalibration.

    ``fuse`` starts with bias 1 and small weights, so the recalibration
    factor multiplying the input begins close to 1.
    """

    def __init__(self, cfg: DrfsppfConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        for name, p in cfg.directional_params().items():
            fan_in = p.kernel_h * p.kernel_w
            w = _kaiming(rng, p.weight_shape(), fan_in, gain=1.0)
            self._add(f"{name}.weight", w)
            self._add(f"{name}.bias", np.zeros(p.out_channels))
        self._add("fuse.weight", _kaiming(rng, (cfg.in_channels, cfg.pooled_channels, 1, 1), cfg.pooled_channels, gain=0.1))
        self._add("fuse.bias", np.ones(cfg.in_channels))
        self._add("proj.weight", _kaiming(rng, (cfg.out_channels, cfg.in_channels, 1, 1), cfg.in_channels, gain=1.0))
        self._add("proj.bias", np.zeros(cfg.out_channels))

    def forward(self, x):
        return drfsppf_forward(x, self.cfg, self.params)


@dataclass(frozen=True)
class SppfConfig:
    in_channels: int
    out_channels: int
    pool_kernel: int = 5

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "proj.weight": (self.out_channels, 4 * self.in_channels, 1, 1),
            "proj.bias": (self.out_channels,),
        }


def sppf_forward(x: Tensor, cfg: SppfConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Classical SPPF tail: pyramid pool then one 1×1 conv 4C -> C_out."""
    with T.scope("pool"):
        f = pyramid_pool(x, cfg.pool_kernel)
    with T.scope("proj"):
        p = ConvParams(4 * cfg.in_channels, cfg.out_channels, 1, 1)
        return T.conv2d(f, weights["proj.weight"], weights["proj.bias"], p)


class SPPF(Block):
    def __init__(self, cfg: SppfConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        self._add("proj.weight", _kaiming(rng, (cfg.out_channels, 4 * cfg.in_channels, 1, 1), 4 * cfg.in_channels, gain=1.0))
        self._add("proj.bias", np.zeros(cfg.out_channels))

    def forward(self, x):
        return sppf_forward(x, self.cfg, self.params)


# -- ODConv --------------------------------------------------------------------


@dataclass(frozen=True)
class OdconvConfig:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None
    dilation: int = 1
    groups: int = 1
    num_kernels: int = 4
    reduction: int = 4
    temperature: float = 1.0

    def __post_init__(self):
        if self.num_kernels < 1:
            raise BlockConfigError(f"ODConv needs at least one kernel, got K={self.num_kernels}")
        if self.temperature <= 0:
            raise BlockConfigError("ODConv temperature must be positive")
        self.geometry  # validates channels/groups

    @property
    def geometry(self) -> ConvParams:
        return ConvParams.square(
            self.in_channels, self.out_channels, self.kernel_size, self.stride, self.padding, self.dilation, self.groups
        )

    @property
    def hidden(self) -> int:
        return max(self.in_channels // self.reduction, 1)

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "kernels": (self.num_kernels,) + self.geometry.weight_shape(),
            "attn.fc1.weight": (self.hidden, self.in_channels),
            "attn.fc1.bias": (self.hidden,),
            "attn.fc2.weight": (self.num_kernels, self.hidden),
            "attn.fc2.bias": (self.num_kernels,),
        }


def odconv_attention(x: Tensor, cfg: OdconvConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Per-sample kernel weights alpha, shape [N, K], each row summing to 1."""
    n = x.shape[0]
    z = T.reshape(T.global_avg_pool(x), (n, cfg.in_channels))
    z = T.relu(T.linear(z, weights["attn.fc1.weight"], weights["attn.fc1.bias"]))
    z = T.linear(z, weights["attn.fc2.weight"], weights["attn.fc2.bias"])
    if cfg.temperature != 1.0:
        z = T.mul(z, 1.0 / cfg.temperature)
    return T.softmax(z, axis=1)


def odconv_forward(x: Tensor, cfg: OdconvConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """sum_i alpha_i * (W_i * x), evaluated as one conv with the alpha-mixed kernel per sample."""
    n = x.shape[0]
    geo = cfg.geometry
    with T.scope("attention"):
        alpha = odconv_attention(x, cfg, weights)
    with T.scope("aggregate"):
        bank = weights["kernels"]
        flat = T.permute(T.reshape(bank, (cfg.num_kernels, -1)), (1, 0))
        mixed = T.reshape(T.linear(alpha, flat), (n,) + geo.weight_shape())
    with T.scope("conv"):
        return T.conv2d(x, mixed, None, geo)


def odconv_forward_literal(x: Tensor, cfg: OdconvConfig, weights: Mapping[str, Tensor]) -> Tensor:
    """Unfused reference: K separate convolutions, scaled and summed."""
    alpha = odconv_attention(x, cfg, weights)
    n = x.shape[0]
    out = None
    for i in range(cfg.num_kernels):
        w_i = T.reshape(T.narrow(weights["kernels"], 0, i, 1), cfg.geometry.weight_shape())
        y = T.conv2d(x, w_i, None, cfg.geometry)
        a_i = T.reshape(T.narrow(alpha, 1, i, 1), (n, 1, 1, 1))
        term = T.mul(y, a_i)
        out = term if out is None else T.add(out, term)
    return out


class ODConv(Block):
    def __init__(self, cfg: OdconvConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        shapes = cfg.weight_shapes()
        geo = cfg.geometry
        fan_in = geo.weight_shape()[1] * geo.kernel_h * geo.kernel_w
        self._add("kernels", _kaiming(rng, shapes["kernels"], fan_in))
        self._add("attn.fc1.weight", _kaiming(rng, shapes["attn.fc1.weight"], cfg.in_channels))
        self._add("attn.fc1.bias", np.zeros(cfg.hidden))
        self._add("attn.fc2.weight", _kaiming(rng, shapes["attn.fc2.weight"], cfg.hidden, gain=1.0))
        self._add("attn.fc2.bias", np.zeros(cfg.num_kernels))

    def forward(self, x):
        return odconv_forward(x, self.cfg, self.params)


# -- SPDConv -------------------------------------------------------------------


@dataclass(frozen=True)
class SpdconvConfig:
    in_channels: int
    out_channels: int
    scale: int = 2
    kernel_size: int = 1

    def __post_init__(self):
        if self.scale < 1:
            raise BlockConfigError(f"SPDConv scale must be >= 1, got {self.scale}")
        if self.kernel_size % 2 == 0:
            raise BlockConfigError("SPDConv kernel_size must be odd (stride-1 same-size conv)")

    @property
    def geometry(self) -> ConvParams:
        return ConvParams.square(self.in_channels * self.scale ** 2, self.out_channels, self.kernel_size, stride=1)

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"conv.weight": self.geometry.weight_shape(), "conv.bias": (self.out_channels,)}


def spdconv_forward(x: Tensor, cfg: SpdconvConfig, weights: Mapping[str, Tensor]) -> Tensor:
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ValueError(f"SPDConv expects {cfg.in_channels} channels, got {c}")
    if h % cfg.scale or w % cfg.scale:
        raise ValueError(f"SPDConv: spatial size {h}x{w} not divisible by scale {cfg.scale}")
    with T.scope("spd"):
        f = T.space_to_depth(x, cfg.scale)
    with T.scope("conv"):
        return T.conv2d(f, weights["conv.weight"], weights["conv.bias"], cfg.geometry)


class SPDConv(Block):
    def __init__(self, cfg: SpdconvConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        geo = cfg.geometry
        self._add("conv.weight", _kaiming(rng, geo.weight_shape(), geo.in_channels * geo.kernel_h * geo.kernel_w))
        self._add("conv.bias", np.zeros(cfg.out_channels))

    def forward(self, x):
        return spdconv_forward(x, self.cfg, self.params)
