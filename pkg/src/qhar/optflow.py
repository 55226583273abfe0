"""Single-scale Lucas-Kanade optical flow and the stacked 2L-channel flow input.

Frames are 2-D ``uint8`` arrays indexed ``[row, col]``. Gradients use central
differences with replicated borders; window sums replicate the border values
of the gradient products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qtensor import QuantParams, QuantTensor

DEFAULT_WINDOW = 15
DEFAULT_TAU = 1e-3
DEFAULT_FLOW_BOUND = 20.0


@dataclass(frozen=True, eq=False)
class FlowField:
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        if self.vx.shape != self.vy.shape:
            raise ValueError("vx and vy planes differ in shape")

    @property
    def height(self) -> int:
        return self.vx.shape[0]

    @property
    def width(self) -> int:
        return self.vx.shape[1]


@dataclass(frozen=True, eq=False)
class FlowStack:
    """Quantized flow planes ordered (dx_1, dy_1, ..., dx_L, dy_L)."""

    L: int
    channels: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        if self.L < 1 or self.channels.ndim != 3 or self.channels.shape[0] != 2 * self.L:
            raise ValueError(f"expected {2 * self.L} flow planes, got shape {self.channels.shape}")

    def as_tensor(self) -> QuantTensor:
        """The stack as a 1 x 2L x H x W network input."""
        return QuantTensor(self.channels[np.newaxis], self.qparams)


def as_frame(frame) -> np.ndarray:
    arr = np.asarray(frame)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = to_luma(arr)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D gray frame, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"frame pixels must be uint8, got {arr.dtype}")
    return arr


def to_luma(rgb) -> np.ndarray:
    """``round(0.299 R + 0.587 G + 0.114 B)`` on an (H, W, 3) uint8 image."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def gradients(prev, next_):
    """Spatial gradients of ``prev`` and the temporal difference ``next - prev``."""
    prev = as_frame(prev)
    next_ = as_frame(next_)
    if prev.shape != next_.shape:
        raise ValueError(f"frame dimensions differ: {prev.shape} vs {next_.shape}")
    p = np.pad(prev.astype(np.float64), 1, mode="edge")
    ix = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    iy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    it = next_.astype(np.float64) - prev.astype(np.float64)
    return ix, iy, it


def window_sum(plane: np.ndarray, n: int) -> np.ndarray:
    """Sum over the n x n window centered on each pixel, replicating borders.

    Gradient products are multiples of 1/4 well below 2**50, so the
    cumulative sums here are exact.
    """
    r = n // 2
    p = np.pad(plane, r, mode="edge")
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    c[1:, 1:] = p.cumsum(axis=0).cumsum(axis=1)
    return c[n:, n:] - c[:-n, n:] - c[n:, :-n] + c[:-n, :-n]


def structure_sums(prev, next_, window_n: int):
    """Per-pixel window sums ``(Sxx, Sxy, Syy, bx, by)`` of the normal equations."""
    ix, iy, it = gradients(prev, next_)
    sxx = window_sum(ix * ix, window_n)
    sxy = window_sum(ix * iy, window_n)
    syy = window_sum(iy * iy, window_n)
    bx = -window_sum(ix * it, window_n)
    by = -window_sum(iy * it, window_n)
    return sxx, sxy, syy, bx, by


def min_eigenvalue(sxx, sxy, syy):
    half_trace = (sxx + syy) / 2.0
    return half_trace - np.hypot((sxx - syy) / 2.0, sxy)


def lk_flow(prev, next_, window_n: int = DEFAULT_WINDOW, tau: float = DEFAULT_TAU) -> FlowField:
    """Dense Lucas-Kanade flow from ``prev`` to ``next_``.

    Pixels whose structure tensor has minimum eigenvalue <= ``tau`` get zero flow.
    """
    if window_n < 3 or window_n % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window_n}")
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    sxx, sxy, syy, bx, by = structure_sums(prev, next_, window_n)
    ok = min_eigenvalue(sxx, sxy, syy) > tau
    det = np.where(ok, sxx * syy - sxy * sxy, 1.0)
    vx = np.where(ok, (syy * bx - sxy * by) / det, 0.0)
    vy = np.where(ok, (sxx * by - sxy * bx) / det, 0.0)
    return FlowField(vx, vy)


def flow_qparams(flow_bound: float) -> QuantParams:
    return QuantParams(flow_bound / 127.0, 128)


def quantize_flow(v, flow_bound: float) -> np.ndarray:
    """``clamp(rint(v / bound * 127) + 128, 0, 255)``; zero flow maps to 128."""
    q = np.rint(np.asarray(v, dtype=np.float64) / flow_bound * 127.0) + 128
    return np.clip(q, 0, 255).astype(np.uint8)


def stack_flows(frames, window_n: int = DEFAULT_WINDOW, tau: float = DEFAULT_TAU,
                flow_bound: float = DEFAULT_FLOW_BOUND, L: int | None = None) -> FlowStack:
    """Compute flow between consecutive frames and stack the 2L quantized planes.

    With ``L`` given, the first ``L + 1`` frames are used; otherwise all of them.
    """
    frames = list(frames)
    if L is None:
        L = len(frames) - 1
    if L < 1 or len(frames) < L + 1:
        raise ValueError(f"need at least L+1 = {max(L, 1) + 1} frames, got {len(frames)}")
    return stack_flow_fields(
        [lk_flow(frames[t - 1], frames[t], window_n, tau) for t in range(1, L + 1)], flow_bound)


def stack_flow_fields(fields, flow_bound: float = DEFAULT_FLOW_BOUND) -> FlowStack:
    if not flow_bound > 0:
        raise ValueError(f"flow_bound must be positive, got {flow_bound}")
    planes = []
    for f in fields:
        planes.append(quantize_flow(f.vx, flow_bound))
        planes.append(quantize_flow(f.vy, flow_bound))
    return FlowStack(len(fields), np.stack(planes), flow_qparams(flow_bound))
