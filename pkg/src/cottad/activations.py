"""NeLU and the baseline activations it is compared against.

NeLU(x) = x for x > 0 and -alpha / (1 + x^2) for x <= 0. As written the
function jumps by alpha at zero (left value -alpha, right limit 0); that jump
is kept on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NeluParams:
    alpha: float = 0.2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"NeLU alpha must be positive, got {self.alpha}")


DEFAULT_NELU = NeluParams()


def _check_finite(x: np.ndarray) -> None:
    if T.precision_mode() == "verify64" and not np.isfinite(x).all():
        raise FloatingPointError("nelu: non-finite input")


def nelu_np(x, alpha: float = 0.2) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, x, -alpha / (1.0 + x * x))


def nelu_grad_np(x, alpha: float = 0.2) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, 1.0, 2.0 * alpha * x / (1.0 + x * x) ** 2)


def nelu(x, params: NeluParams = DEFAULT_NELU):
    """NeLU of a scalar, array or Tensor. Tensors get a differentiable op."""
    if isinstance(x, Tensor):
        _check_finite(x.data)
        if T.tracking_kinks():
            T.report_kink("nelu", np.min(np.abs(x.data)))
        a = params.alpha
        return T.unary(x, lambda v: nelu_np(v, a), lambda v, _y: nelu_grad_np(v, a), "nelu")
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr)
    out = nelu_np(arr, params.alpha)
    return float(out) if out.ndim == 0 else out


def nelu_grad(x, params: NeluParams = DEFAULT_NELU):
    """Derivative of NeLU: 1 for x > 0, 2*alpha*x / (1 + x^2)^2 otherwise."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = nelu_grad_np(arr, params.alpha)
    return float(out) if out.ndim == 0 else out


def relu(x):
    if isinstance(x, Tensor):
        return T.relu(x)
    out = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return float(out) if out.ndim == 0 else out


def silu(x):
    if isinstance(x, Tensor):
        return T.silu(x)
    arr = np.asarray(x, dtype=np.float64)
    out = arr * T._sigmoid_np(np.atleast_1d(arr)).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    if isinstance(x, Tensor):
        return T.sigmoid(x)
    arr = np.asarray(x, dtype=np.float64)
    out = T._sigmoid_np(np.atleast_1d(arr)).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


ACTIVATIONS = ("nelu", "relu", "silu", "sigmoid", "identity")


def apply(name: str, x: Tensor, nelu_params: NeluParams = DEFAULT_NELU) -> Tensor:
    """Apply an activation chosen by config name."""
    if name == "nelu":
        return nelu(x, nelu_params)
    if name == "relu":
        return T.relu(x)
    if name == "silu":
        return T.silu(x)
    if name == "sigmoid":
        return T.sigmoid(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")
