"""Per-tensor affine uint8 quantization.

Real values map to stored bytes as ``q = clamp(rint(x / scale) + zero_point, 0, 255)``.
All rounding is half-to-even (``np.rint``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

QMIN = 0
QMAX = 255
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        scale = float(self.scale)
        if not math.isfinite(scale) or scale <= 0:
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        zp = int(self.zero_point)
        if zp != self.zero_point or not QMIN <= zp <= QMAX:
            raise ValueError(f"zero_point must be an integer in [0, 255], got {self.zero_point!r}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """uint8 tensor (normally NCHW) plus its quantization parameters.

    The array is copied on construction and marked read-only.
    """

    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            if arr.size and (not np.issubdtype(arr.dtype, np.integer)
                             or arr.min() < QMIN or arr.max() > QMAX):
                raise ValueError("QuantTensor data must hold integers in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def centered(self) -> np.ndarray:
        """Stored values minus the zero point, as int64."""
        return self.data.astype(np.int64) - self.qparams.zero_point

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return self.qparams == other.qparams and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"QuantTensor(shape={self.shape}, qparams={self.qparams})"


def round_half_even(x):
    return np.rint(x)


def quantize(x, qp: QuantParams) -> QuantTensor:
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite value {x[idx]!r} at index {idx}")
    q = np.rint(x / qp.scale) + qp.zero_point
    return QuantTensor(np.clip(q, QMIN, QMAX).astype(np.uint8), qp)


def dequantize(q: QuantTensor) -> np.ndarray:
    return (q.data.astype(np.float64) - q.qparams.zero_point) * q.qparams.scale


def compute_qparams(min_val: float, max_val: float) -> QuantParams:
    """Affine parameters covering ``[min(0, min_val), max(0, max_val)]`` in 256 levels."""
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise ValueError(f"range bounds must be finite, got ({min_val}, {max_val})")
    if min_val > max_val:
        raise ValueError(f"min_val {min_val} exceeds max_val {max_val}")
    lo = min(0.0, float(min_val))
    hi = max(0.0, float(max_val))
    scale = (hi - lo) / (QMAX - QMIN)
    if scale < SCALE_FLOOR:
        scale = SCALE_FLOOR
    zp = int(np.clip(np.rint(-lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def requantize(acc, in_qp: QuantParams, w_qp: QuantParams, out_qp: QuantParams) -> QuantTensor:
    """Map int32 accumulators (units of in_scale * w_scale) to uint8 in ``out_qp``."""
    multiplier = (in_qp.scale * w_qp.scale) / out_qp.scale
    q = np.rint(np.asarray(acc, dtype=np.float64) * multiplier) + out_qp.zero_point
    return QuantTensor(np.clip(q, QMIN, QMAX).astype(np.uint8), out_qp)
