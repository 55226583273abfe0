"""Integer kernels for the fused Conv+BN+ReLU layer, pooling, FC and softmax.

Convolution accumulates ``(ifm_q - ifm_zp) * (w_q - w_zp)`` products. The
products are at most 255*255 in magnitude and the layer precondition keeps
every sum below 2**31, so evaluating the dot products with float64 matmul is
exact (every partial sum is an integer below 2**53) regardless of the BLAS
summation order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .qtensor import QuantParams, QuantTensor, requantize

ACC_LIMIT = 2**31
_MAX_PRODUCT = 255 * 255


class Activation(str, enum.Enum):
    RELU = "relu"
    LEAKY_RELU_0P1 = "leaky_relu_0p1"
    NONE = "none"

    @classmethod
    def parse(cls, name: str) -> "Activation":
        if isinstance(name, cls):
            return name
        aliases = {"leaky": cls.LEAKY_RELU_0P1, "leaky_relu": cls.LEAKY_RELU_0P1, "linear": cls.NONE}
        try:
            return aliases.get(name) or cls(name)
        except ValueError:
            raise ValueError(f"unknown activation {name!r}") from None


@dataclass(frozen=True)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mu", "sigma2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        n = len(self.gamma)
        if any(len(getattr(self, k)) != n for k in ("beta", "mu", "sigma2")):
            raise ValueError("batch-norm parameter arrays differ in length")
        if np.any(self.sigma2 < 0):
            raise ValueError("batch-norm variance must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("batch-norm epsilon must be positive")

    def __len__(self):
        return len(self.gamma)


def check_accumulator_bound(fan_in: int, bias, what: str = "layer") -> None:
    """Raise ConfigError if worst-case accumulation can overflow int32."""
    max_bias = int(np.max(np.abs(np.asarray(bias, dtype=np.int64)))) if np.size(bias) else 0
    worst = fan_in * _MAX_PRODUCT + max_bias
    if worst >= ACC_LIMIT:
        raise ConfigError(
            f"{what}: worst-case accumulator {worst} (fan-in {fan_in}) does not fit in int32")


@dataclass(frozen=True, eq=False)
class FusedLayerParams:
    """Folded, quantized parameters of one Conv+BN+activation layer.

    ``bias`` is in accumulator units, i.e. real bias / (in_scale * w_scale).
    """

    weights: QuantTensor
    bias: np.ndarray
    out_qp: QuantParams
    activation: Activation = Activation.RELU
    stride: int = 1
    padding: int = 0
    name: str = field(default="conv")

    def __post_init__(self):
        if self.weights.data.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ConfigError(f"{self.name}: weights must have shape (out, in, K, K), got {self.weights.shape}")
        bias = np.asarray(self.bias)
        if bias.shape != (self.out_ch,):
            raise ConfigError(f"{self.name}: bias length {bias.size} != out_ch {self.out_ch}")
        if bias.size and (bias.min() < -ACC_LIMIT or bias.max() >= ACC_LIMIT):
            raise ConfigError(f"{self.name}: bias does not fit in int32")
        bias = bias.astype(np.int32)
        bias.flags.writeable = False
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"{self.name}: stride must be >= 1 and padding >= 0")
        check_accumulator_bound(self.in_ch * self.k * self.k, bias, self.name)

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return conv_output_size(h, self.k, self.stride, self.padding), \
            conv_output_size(w, self.k, self.stride, self.padding)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def fold_bn(conv_w, conv_b, bn: BNParams):
    """Fold batch-norm into conv weights and bias. Returns ``(W', b')`` in float64."""
    conv_w = np.asarray(conv_w, dtype=np.float64)
    conv_b = np.asarray(conv_b, dtype=np.float64).ravel()
    if conv_w.shape[0] != len(bn) or conv_b.shape[0] != len(bn):
        raise ValueError(
            f"channel mismatch: weights {conv_w.shape[0]}, bias {conv_b.shape[0]}, batch-norm {len(bn)}")
    inv_std = 1.0 / np.sqrt(bn.sigma2 + bn.epsilon)
    factor = bn.gamma * inv_std
    w = conv_w * factor.reshape((-1,) + (1,) * (conv_w.ndim - 1))
    b = bn.beta + factor * (conv_b - bn.mu)
    return w, b


def batch_norm(x, bn: BNParams):
    """Float batch-norm over axis 1 of an NCHW array."""
    shape = (1, -1) + (1,) * (np.ndim(x) - 2)
    return (bn.gamma.reshape(shape) * (np.asarray(x, dtype=np.float64) - bn.mu.reshape(shape))
            / np.sqrt(bn.sigma2.reshape(shape) + bn.epsilon) + bn.beta.reshape(shape))


def _conv_dot(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid convolution of padded NCHW ``xp`` with (M, C, K, K) ``w`` as float64 matmul."""
    m, c, k, _ = w.shape
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(m, c * k * k).T
    return out.reshape(n, ho, wo, m).transpose(0, 3, 1, 2)


def conv2d_float(x, w, b=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference float convolution (NCHW, cross-correlation, zero padding)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = _conv_dot(xp, w, stride)
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1)
    return out


def padded_centered_input(ifm: QuantTensor, padding: int) -> np.ndarray:
    """Zero-centered input as float64, zero padded (padding is real-valued 0)."""
    x = ifm.centered().astype(np.float64)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def centered_weights(params: FusedLayerParams) -> np.ndarray:
    return params.weights.centered().astype(np.float64)


def conv_partial(xp_region: np.ndarray, w_centered: np.ndarray, stride: int) -> np.ndarray:
    """Exact integer partial sums (int64) over a padded, centered input region."""
    return _conv_dot(xp_region, w_centered, stride).astype(np.int64)


def conv2d_acc(ifm: QuantTensor, params: FusedLayerParams) -> np.ndarray:
    """Integer convolution plus bias; returns an int32 NCHW accumulator array."""
    if ifm.data.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {ifm.shape}")
    if ifm.shape[1] != params.in_ch:
        raise ValueError(f"{params.name}: input has {ifm.shape[1]} channels, layer expects {params.in_ch}")
    h_out, w_out = params.output_hw(ifm.shape[2], ifm.shape[3])
    if h_out < 1 or w_out < 1:
        raise ValueError(f"{params.name}: input {ifm.shape[2:]} too small for kernel {params.k}")
    xp = padded_centered_input(ifm, params.padding)
    acc = conv_partial(xp, centered_weights(params), params.stride)
    acc += params.bias.reshape(1, -1, 1, 1)
    return acc.astype(np.int32)


def apply_activation(acc, kind) -> np.ndarray:
    """Activation in the accumulator domain.

    Leaky slope 0.1 is evaluated as ``rint(a / 10)``: the quotient is
    correctly rounded and exact at every .5 tie, so half-even rounding is exact.
    """
    kind = Activation.parse(kind)
    acc = np.asarray(acc)
    if kind is Activation.RELU:
        return np.maximum(acc, 0).astype(acc.dtype)
    if kind is Activation.LEAKY_RELU_0P1:
        neg = np.rint(acc.astype(np.float64) / 10.0).astype(acc.dtype)
        return np.where(acc >= 0, acc, neg)
    return acc.copy()


def finish_layer(acc, in_qp: QuantParams, params: FusedLayerParams) -> QuantTensor:
    """Activation then requantization of a finished accumulator block."""
    return requantize(apply_activation(acc, params.activation), in_qp, params.weights.qparams, params.out_qp)


def fused_layer(ifm: QuantTensor, params: FusedLayerParams) -> QuantTensor:
    return finish_layer(conv2d_acc(ifm, params), ifm.qparams, params)


def maxpool(x: QuantTensor, k: int, stride: int) -> QuantTensor:
    if k < 1 or stride < 1:
        raise ValueError(f"pool kernel and stride must be positive, got k={k}, stride={stride}")
    if x.data.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    h, w = x.shape[2:]
    if h < k or w < k:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return QuantTensor(win.max(axis=(4, 5)), x.qparams)


def fully_connected(x: QuantTensor, w: QuantTensor, bias) -> np.ndarray:
    """Integer dense layer over the flattened trailing dims of ``x``.

    Returns int32 accumulators of shape (batch, out_features).
    """
    n = x.shape[0] if x.data.ndim > 1 else 1
    flat = x.centered().reshape(n, -1).astype(np.float64)
    if w.data.ndim != 2:
        raise ValueError(f"FC weights must be 2-D, got shape {w.shape}")
    out_f, in_f = w.shape
    if flat.shape[1] != in_f:
        raise ValueError(f"FC expects {in_f} input features, got {flat.shape[1]}")
    bias = np.asarray(bias, dtype=np.int64)
    if bias.shape != (out_f,):
        raise ValueError(f"FC bias length {bias.size} != out_features {out_f}")
    check_accumulator_bound(in_f, bias, "fully_connected")
    acc = (flat @ w.centered().astype(np.float64).T).astype(np.int64) + bias
    return acc.astype(np.int32)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
