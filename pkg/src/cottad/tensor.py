"""Dense tensors with a small reverse-mode tape.

Everything here works on NCHW numpy arrays. Each primitive returns a new
``Tensor``; when any input requires a gradient the output records its
parents and a closure mapping the output gradient to input gradients.
``Tensor.backward`` walks that graph in reverse topological order.

Two precision modes exist: ``verify64`` (float64, every primitive output is
checked for non-finite values) and ``bench32`` (float32, no checks). The mode
comes from ``COTTAD_PRECISION`` unless overridden with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRECISION_MODES = ("verify64", "bench32")

_state = threading.local()


def _mode() -> str:
    mode = getattr(_state, "mode", None)
    if mode is None:
        mode = os.environ.get("COTTAD_PRECISION", "verify64")
        if mode not in PRECISION_MODES:
            raise ValueError(f"COTTAD_PRECISION must be one of {PRECISION_MODES}, got {mode!r}")
    return mode


def precision_mode() -> str:
    return _mode()


def default_dtype() -> np.dtype:
    return np.dtype(np.float64) if _mode() == "verify64" else np.dtype(np.float32)


@contextlib.contextmanager
def precision(mode: str):
    if mode not in PRECISION_MODES:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = getattr(_state, "mode", None)
    _state.mode = mode
    try:
        yield
    finally:
        _state.mode = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


# -- instrumentation hooks (FLOPs profiler, kink tracking) -------------------


class OpRecord:
    __slots__ = ("path", "op", "macs", "ops", "out_shape")

    def __init__(self, path, op, macs, ops, out_shape):
        self.path = path
        self.op = op
        self.macs = macs
        self.ops = ops
        self.out_shape = out_shape


@contextlib.contextmanager
def profile():
    """Collect one :class:`OpRecord` per executed primitive (per-sample counts)."""
    records: list[OpRecord] = []
    prev = getattr(_state, "records", None)
    _state.records = records
    try:
        yield records
    finally:
        _state.records = prev


@contextlib.contextmanager
def scope(name: str):
    """Name the layer that primitives executed inside this block belong to."""
    stack = getattr(_state, "scope", None)
    if stack is None:
        stack = _state.scope = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


def _record(op: str, macs: int, ops: int, out_shape) -> None:
    records = getattr(_state, "records", None)
    if records is None:
        return
    path = ".".join(getattr(_state, "scope", None) or [])
    records.append(OpRecord(path, op, int(macs), int(ops), tuple(out_shape)))


@contextlib.contextmanager
def track_kinks():
    """Record, per kink type, the smallest distance of any input to a non-smooth point.

    Used by gradient checks to reject random instances where a finite
    difference would straddle a kink (NeLU jump at 0, ReLU corner, max-pool
    near-ties) rather than measuring the derivative.
    """
    kinks: dict[str, float] = {}
    prev = getattr(_state, "kinks", None)
    _state.kinks = kinks
    try:
        yield kinks
    finally:
        _state.kinks = prev


def tracking_kinks() -> bool:
    return getattr(_state, "kinks", None) is not None


def report_kink(kind: str, distance: float) -> None:
    kinks = getattr(_state, "kinks", None)
    if kinks is None:
        return
    kinks[kind] = min(kinks.get(kind, np.inf), float(distance))


# -- Tensor ------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None and (arr.dtype.kind in "fiub"):
            dtype = default_dtype()
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _mode() == "verify64" and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- convolution geometry ----------------------------------------------------


def _pad4(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding, padding, padding, padding)
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return padding  # type: ignore[return-value]
    raise ValueError(f"padding must be an int, (ph, pw) or (top, bottom, left, right); got {padding}")


@dataclass(frozen=True)
class ConvParams:
    """Geometry of a 2-D convolution. ``padding`` is (top, bottom, left, right)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "padding", _pad4(self.padding))
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation", "groups"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvParams.{field} must be positive, got {getattr(self, field)}")
        if min(self.padding) < 0:
            raise ValueError(f"ConvParams.padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}"
            )

    @classmethod
    def square(cls, in_channels, out_channels, kernel, stride=1, padding=None, dilation=1, groups=1):
        """k×k conv; ``padding=None`` picks same-size padding for odd k."""
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, kernel, kernel, stride, padding, dilation, groups)

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        top, bottom, left, right = self.padding
        ho = (h + top + bottom - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        wo = (w + left + right - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv output would be empty: input {h}x{w} with {self}")
        return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dil: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    rs, cs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dil, j * dil
            cols[:, :, i * kw + j] = xp[:, :, r0 : r0 + rs : stride, c0 : c0 + cs : stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, dil, ho, wo) -> np.ndarray:
    gx = np.zeros(padded_shape, dtype=cols.dtype)
    rs, cs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dil, j * dil
            gx[:, :, r0 : r0 + rs : stride, c0 : c0 + cs : stride] += cols[:, :, i * kw + j]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, params: ConvParams | None = None) -> Tensor:
    """2-D cross-correlation (no kernel flip), zero padding.

    ``weight`` is ``[Cout, Cin/groups, kh, kw]``, or ``[N, Cout, Cin/groups, kh, kw]``
    for per-sample kernels (dynamic convolution).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [N, C, H, W], got shape {x.shape}")
    per_sample = weight.ndim == 5
    wshape = weight.shape[1:] if per_sample else weight.shape
    if params is None:
        params = ConvParams(x.shape[1], wshape[0], wshape[2], wshape[3])
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ValueError(f"conv2d: input channels {c} != params.in_channels {params.in_channels}")
    if tuple(wshape) != params.weight_shape():
        raise ValueError(f"conv2d: weight shape {tuple(wshape)} != expected {params.weight_shape()} (Cout, Cin/groups, kh, kw)")
    if per_sample and weight.shape[0] != n:
        raise ValueError(f"conv2d: per-sample weight batch {weight.shape[0]} != input batch {n}")
    if bias is not None and tuple(bias.shape) != (params.out_channels,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({params.out_channels},)")

    g, kh, kw = params.groups, params.kernel_h, params.kernel_w
    s, d = params.stride, params.dilation
    top, bottom, left, right = params.padding
    ho, wo = params.out_size(h, w)
    cg, cog = c // g, params.out_channels // g
    kk = cg * kh * kw

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))) if any(params.padding) else x.data
    cols = _im2col(xp, kh, kw, s, d, ho, wo).reshape(n, g, kk, ho * wo)
    if per_sample:
        wm = weight.data.reshape(n, g, cog, kk)
    else:
        wm = weight.data.reshape(g, cog, kk)
    out = np.matmul(wm, cols).reshape(n, params.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _record("conv", kh * kw * cg * params.out_channels * ho * wo, 0, (1, params.out_channels, ho, wo))

    def backward(gout):
        gm = gout.reshape(n, g, cog, ho * wo)
        gw = np.matmul(gm, cols.swapaxes(-1, -2))
        gw = gw.reshape(weight.shape) if per_sample else gw.sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            wt = wm.swapaxes(-1, -2)
            gcols = np.matmul(wt, gm).reshape(n, c, kh * kw, ho, wo)
            gx = _col2im(gcols, xp.shape, kh, kw, s, d, ho, wo)
            gx = gx[:, :, top : top + h, left : left + w]
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, params: ConvParams | None = None) -> Tensor:
    """conv2d with one kernel per channel (``groups == channels``)."""
    c = x.shape[1]
    if params is None:
        kh, kw = weight.shape[-2:]
        params = ConvParams(c, c, kh, kw, padding=(kh // 2, kw // 2), groups=c)
    if params.groups != c or params.in_channels != c or params.out_channels != c:
        raise ValueError(f"depthwise_conv2d requires groups == in == out channels ({c}), got {params}")
    return conv2d(x, weight, bias, params)


# -- pooling / rearrangement ---------------------------------------------------


def maxpool2d(x: Tensor, kernel: int, stride: int = 1, padding: int | None = None) -> Tensor:
    """Max pooling with -inf padding. Default padding keeps the size for odd kernels at stride 1."""
    if padding is None:
        if kernel % 2 == 0:
            raise ValueError(f"maxpool2d: even kernel {kernel} cannot preserve spatial size")
        padding = kernel // 2
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    _record("pool", 0, c * ho * wo, (1, c, ho, wo))
    if tracking_kinks():
        # exact duplicates come from overlapping upstream windows and are harmless
        runner_up = np.where(flat == out[..., None], -np.inf, flat).max(axis=-1)
        gap = out - runner_up
        finite = np.isfinite(gap)
        report_kink("maxpool", gap[finite].min() if finite.any() else np.inf)

    def backward(gout):
        gx = np.zeros_like(xp)
        rs, cs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                m = arg == i * kernel + j
                if m.any():
                    gx[:, :, i : i + rs : stride, j : j + cs : stride] += np.where(m, gout, 0.0)
        return (gx[:, :, padding : padding + h, padding : padding + w],)

    return _make(out, (x,), backward, "maxpool2d")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for k, t in enumerate(tensors[1:], 1):
        if t.ndim != nd or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ValueError(f"concat: tensor {k} has shape {t.shape}, incompatible with {ref} outside axis {ax}")
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    _record("concat", 0, 0, (1,) + out.shape[1:])

    def backward(gout):
        return tuple(np.split(gout, sizes, axis=ax))

    return _make(out, tensors, backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ValueError(f"narrow: [{start}, {start + length}) out of range for axis size {x.shape[ax]}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, start + length)
    index = tuple(index)
    out = x.data[index].copy()

    def backward(gout):
        gx = np.zeros_like(x.data)
        gx[index] = gout
        return (gx,)

    return _make(out, (x,), backward, "narrow")


def space_to_depth(x: Tensor, scale: int) -> Tensor:
    """[N,C,H,W] -> [N, C*s*s, H/s, W/s]; channel c*s*s + dy*s + dx holds offset (dy, dx)."""
    n, c, h, w = x.shape
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"space_to_depth: spatial size {h}x{w} not divisible by scale {scale}")
    s = scale
    out = x.data.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s)
    _record("reshape", 0, 0, (1,) + out.shape[1:])

    def backward(gout):
        return (gout.reshape(n, c, s, s, h // s, w // s).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return _make(out, (x,), backward, "space_to_depth")


def depth_to_space(x: Tensor, scale: int) -> Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    n, cs2, h, w = x.shape
    s = scale
    if s < 1 or cs2 % (s * s):
        raise ValueError(f"depth_to_space: channels {cs2} not divisible by scale^2 = {s * s}")
    c = cs2 // (s * s)
    out = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)
    _record("reshape", 0, 0, (1,) + out.shape[1:])

    def backward(gout):
        return (gout.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, cs2, h, w),)

    return _make(out, (x,), backward, "depth_to_space")


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)
    _record("reshape", 0, 0, (1, c, h * scale, w * scale))

    def backward(gout):
        return (gout.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _record("pool", 0, c, (1, c, 1, 1))

    def backward(gout):
        return (np.broadcast_to(gout / (h * w), x.shape).copy(),)

    return _make(out, (x,), backward, "global_avg_pool")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(gout):
        return (gout.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(gout):
        return (gout.transpose(inv),)

    return _make(out, (x,), backward, "permute")


# -- dense algebra -------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is [Dout, Din]."""
    x, weight = as_tensor(x), as_tensor(weight)
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input last dim {x.shape[-1]} != weight Din {din}")
    if bias is not None and tuple(bias.shape) != (dout,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({dout},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    rows = int(np.prod(x.shape[1:-1], dtype=np.int64)) if x.ndim > 1 else 1
    _record("linear", rows * din * dout, 0, (1,) + out.shape[1:])

    def backward(gout):
        g2 = gout.reshape(-1, dout)
        gx = gout @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, din)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "linear")


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    # b may be a scalar, or an [N, C, 1, 1] / [N, 1, 1, 1] map scaling a full [N, C, H, W] map
    if a == b or len(b) == 0:
        return True
    return len(a) == len(b) == 4 and b[0] == a[0] and b[1] in (1, a[1]) and b[2:] == (1, 1)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=(2, 3) if shape[1] != 1 or g.shape[1] == 1 else (1, 2, 3), keepdims=True)


def _binary(a, b, op: str):
    a_is_t, b_is_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if not a_is_t:
        a, b = b, a
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    if not _broadcast_ok(a.shape, b.shape):
        if _broadcast_ok(b.shape, a.shape):
            a, b = b, a
        else:
            raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible (only trailing 1x1 spatial)")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    out = a.data + b.data
    _record("elementwise", 0, out[0].size if out.ndim else 1, (1,) + out.shape[1:])

    def backward(gout):
        return gout, _reduce_to(gout, b.shape)

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Hadamard product; also scales by a Python scalar."""
    a, b = _binary(a, b, "mul")
    out = a.data * b.data
    _record("elementwise", 0, out[0].size if out.ndim else 1, (1,) + out.shape[1:])

    def backward(gout):
        ga = gout * b.data if a.requires_grad else None
        gb = _reduce_to(gout * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def sum_(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(gout):
        g = gout if axis is None else np.expand_dims(gout, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis), 1.0 / count)


# -- pointwise nonlinearities ------------------------------------------------


def unary(x: Tensor, fwd: Callable, deriv: Callable, op: str, kind: str = "activation") -> Tensor:
    """Elementwise op; ``deriv(x, y)`` returns dy/dx given input and output arrays."""
    out = fwd(x.data)
    _record(kind, 0, out[0].size if out.ndim else 1, (1,) + out.shape[1:])

    def backward(gout):
        return (gout * deriv(x.data, out),)

    return _make(out, (x,), backward, op)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return unary(x, _sigmoid_np, lambda _x, y: y * (1.0 - y), "sigmoid")


def relu(x: Tensor) -> Tensor:
    if tracking_kinks():
        report_kink("relu", np.min(np.abs(x.data)))
    return unary(x, lambda a: np.maximum(a, 0.0), lambda a, _y: (a > 0).astype(a.dtype), "relu")


def silu(x: Tensor) -> Tensor:
    def deriv(a, _y):
        s = _sigmoid_np(a)
        return s * (1.0 + a * (1.0 - s))

    return unary(x, lambda a: a * _sigmoid_np(a), deriv, "silu")


def softplus(x: Tensor) -> Tensor:
    return unary(x, lambda a: np.logaddexp(0.0, a), lambda a, _y: _sigmoid_np(a), "softplus")


def abs_(x: Tensor) -> Tensor:
    if tracking_kinks():
        report_kink("abs", np.min(np.abs(x.data)))
    return unary(x, np.abs, lambda a, _y: np.sign(a), "abs", kind="elementwise")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _record("activation", 0, out[0].size if out.ndim > 1 else out.size, (1,) + out.shape[1:])

    def backward(gout):
        return (out * (gout - (gout * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(gout):
        return (gout - np.exp(out) * gout.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# -- finite-difference oracle ------------------------------------------------


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of ``x``."""
    base = np.array(x.data, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)

    def value(arr):
        with no_grad():
            out = f(Tensor(arr, dtype=np.float64))
        return float(out.data.sum()) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(1, |n_i|)."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Compare reverse-mode gradients of ``sum(f(*inputs))`` with central differences.

    Returns the max relative error per input. Requires verify64 mode.
    """
    if _mode() != "verify64":
        raise RuntimeError("gradcheck is only defined in verify64 mode")
    leaves = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    out = f(*leaves)
    sum_(out).backward()
    errors = []
    for k, leaf in enumerate(leaves):
        def partial(v, k=k):
            args = [Tensor(l.data) for l in leaves]
            args[k] = v
            return f(*args)

        numeric = finite_difference_grad(partial, leaf, h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errors.append(relative_error(analytic, numeric))
    return errors

