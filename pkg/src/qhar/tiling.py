"""Loop-tiled, output-stationary execution of fused conv layers.

Output tiles span (rows, cols, out-channels). Each tile walks the input
channels in ascending ``Tn`` chunks, accumulating exact int64 partial sums,
then applies bias, activation and requantization once. Tiles are dealt to
workers round-robin; every tile is owned by exactly one worker, so the
result does not depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InfeasiblePlanError
from .fused_ops import (FusedLayerParams, centered_weights, conv_output_size, conv_partial,
                        finish_layer, padded_centered_input)
from .qtensor import QuantTensor

ACC_BYTES = 4
# 312 BRAM36 blocks (36 Kib each), the on-chip block RAM of a ZCU104-class device.
DEFAULT_BUFFER_BUDGET = 312 * 36 * 1024 // 8


@dataclass(frozen=True)
class TilingPlan:
    tr: int
    tc: int
    tn: int
    tm: int

    def __post_init__(self):
        if min(self.tr, self.tc, self.tn, self.tm) < 1:
            raise ValueError(f"tile extents must be >= 1, got {self}")

    @classmethod
    def parse(cls, text: str) -> "TilingPlan":
        """Parse ``"Tr,Tc,Tn,Tm"``."""
        parts = text.split(",")
        if len(parts) != 4:
            raise ValueError(f"plan must be Tr,Tc,Tn,Tm, got {text!r}")
        return cls(*(int(p) for p in parts))

    @classmethod
    def full(cls, geom: "LayerGeometry") -> "TilingPlan":
        return cls(geom.h_out, geom.w_out, geom.in_ch, geom.out_ch)

    def clamp(self, geom: "LayerGeometry") -> "TilingPlan":
        return TilingPlan(min(self.tr, geom.h_out), min(self.tc, geom.w_out),
                          min(self.tn, geom.in_ch), min(self.tm, geom.out_ch))

    def __str__(self):
        return f"{self.tr},{self.tc},{self.tn},{self.tm}"


@dataclass(frozen=True)
class ResourceModel:
    buffer_budget_bytes: int = DEFAULT_BUFFER_BUDGET
    pe_count: int = 16
    simd_width: int = 16

    def __post_init__(self):
        if min(self.buffer_budget_bytes, self.pe_count, self.simd_width) < 1:
            raise ValueError(f"resource model fields must be positive, got {self}")


@dataclass(frozen=True)
class LayerGeometry:
    """Shape of one conv layer as seen by the tiler."""

    in_ch: int
    out_ch: int
    k: int
    stride: int
    padding: int
    h_in: int
    w_in: int

    @classmethod
    def of(cls, params: FusedLayerParams, h_in: int, w_in: int) -> "LayerGeometry":
        return cls(params.in_ch, params.out_ch, params.k, params.stride, params.padding, h_in, w_in)

    @property
    def h_out(self) -> int:
        return conv_output_size(self.h_in, self.k, self.stride, self.padding)

    @property
    def w_out(self) -> int:
        return conv_output_size(self.w_in, self.k, self.stride, self.padding)

    def span(self, n_out: int) -> int:
        """Input extent (padded coordinates) needed for ``n_out`` output positions."""
        return (n_out - 1) * self.stride + self.k


@dataclass(frozen=True)
class Tile:
    index: int
    r0: int
    r1: int
    c0: int
    c1: int
    m0: int
    m1: int


@dataclass(frozen=True)
class TileRecord:
    tile_index: int
    worker: int
    r0: int
    r1: int
    c0: int
    c1: int
    m0: int
    m1: int
    n0: int
    n1: int
    input_bytes: int
    weight_bytes: int
    output_bytes: int


@dataclass(frozen=True)
class ExecutionTrace:
    records: tuple[TileRecord, ...]
    input_bytes: int = 0
    weight_bytes: int = 0
    output_bytes: int = 0

    @classmethod
    def from_records(cls, records) -> "ExecutionTrace":
        records = tuple(sorted(records, key=lambda r: (r.tile_index, r.n0)))
        return cls(records,
                   sum(r.input_bytes for r in records),
                   sum(r.weight_bytes for r in records),
                   sum(r.output_bytes for r in records))

    @property
    def total_bytes(self) -> int:
        return self.input_bytes + self.weight_bytes + self.output_bytes


def _chunks(extent: int, size: int):
    return [(s, min(s + size, extent)) for s in range(0, extent, size)]


def output_tiles(plan: TilingPlan, out_shape) -> list[Tile]:
    """Output tiles of an (M, H_out, W_out) map in (row, col, out-channel) order."""
    m, h, w = out_shape
    tiles = []
    for r0, r1 in _chunks(h, plan.tr):
        for c0, c1 in _chunks(w, plan.tc):
            for m0, m1 in _chunks(m, plan.tm):
                tiles.append(Tile(len(tiles), r0, r1, c0, c1, m0, m1))
    return tiles


def parallel_schedule(plan: TilingPlan, out_shape, workers: int) -> list[list[int]]:
    """Round-robin assignment of tile indices to ``workers``."""
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    n_tiles = len(output_tiles(plan, out_shape))
    return [list(range(w, n_tiles, workers)) for w in range(workers)]


def buffer_footprint(plan: TilingPlan, geom: LayerGeometry) -> int:
    """On-chip bytes for one input tile, one weight tile and one int32 output tile."""
    p = plan.clamp(geom)
    input_tile = geom.span(p.tr) * geom.span(p.tc) * p.tn
    weight_tile = p.tm * p.tn * geom.k * geom.k
    output_tile = p.tr * p.tc * p.tm * ACC_BYTES
    return input_tile + weight_tile + output_tile


def estimate_traffic(plan: TilingPlan, geom: LayerGeometry) -> int:
    """Off-chip bytes for the tiled schedule.

    Input tiles are refetched once per out-channel tile, the full weight set
    once per spatial tile, and every output byte is written back once.
    """
    p = plan.clamp(geom)
    row_span = sum(geom.span(r1 - r0) for r0, r1 in _chunks(geom.h_out, p.tr))
    col_span = sum(geom.span(c1 - c0) for c0, c1 in _chunks(geom.w_out, p.tc))
    n_row = math.ceil(geom.h_out / p.tr)
    n_col = math.ceil(geom.w_out / p.tc)
    n_out_ch = math.ceil(geom.out_ch / p.tm)
    inputs = n_out_ch * row_span * col_span * geom.in_ch
    weights = n_row * n_col * geom.out_ch * geom.in_ch * geom.k * geom.k
    outputs = geom.out_ch * geom.h_out * geom.w_out
    return inputs + weights + outputs


def estimate_cycles(geom: LayerGeometry, model: ResourceModel) -> int:
    """Compute cycles with ``pe_count`` output lanes and ``simd_width``-wide inner products."""
    outputs = geom.out_ch * geom.h_out * geom.w_out
    return math.ceil(outputs / model.pe_count) * math.ceil(geom.in_ch * geom.k * geom.k / model.simd_width)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def select_plan(geom: LayerGeometry, model: ResourceModel) -> TilingPlan:
    """Traffic-minimizing plan whose footprint fits the buffer budget.

    Candidates are the divisors of each extent. Ties prefer larger Tm, then
    Tr, Tc, Tn.
    """
    budget = model.buffer_budget_bytes
    if buffer_footprint(TilingPlan(1, 1, 1, 1), geom) > budget:
        raise InfeasiblePlanError(
            f"budget {budget} B below the minimum footprint "
            f"{buffer_footprint(TilingPlan(1, 1, 1, 1), geom)} B of a 1x1x1x1 plan")
    best_key, best = None, None
    for tm in _divisors(geom.out_ch):
        for tr in _divisors(geom.h_out):
            for tc in _divisors(geom.w_out):
                for tn in _divisors(geom.in_ch):
                    plan = TilingPlan(tr, tc, tn, tm)
                    if buffer_footprint(plan, geom) > budget:
                        # footprint grows with tn
                        break
                    key = (estimate_traffic(plan, geom), -tm, -tr, -tc, -tn)
                    if best_key is None or key < best_key:
                        best_key, best = key, plan
    return best


def tiled_fused_layer(ifm: QuantTensor, params: FusedLayerParams, plan: TilingPlan,
                      workers: int = 1) -> tuple[QuantTensor, ExecutionTrace]:
    """Tiled equivalent of :func:`qhar.fused_ops.fused_layer`, byte-identical output."""
    if ifm.data.ndim != 4 or ifm.shape[1] != params.in_ch:
        raise ValueError(f"{params.name}: input shape {ifm.shape} does not match in_ch {params.in_ch}")
    n, _, h_in, w_in = ifm.shape
    geom = LayerGeometry.of(params, h_in, w_in)
    if geom.h_out < 1 or geom.w_out < 1:
        raise ValueError(f"{params.name}: input {h_in}x{w_in} too small for kernel {params.k}")
    plan = plan.clamp(geom)
    xp = padded_centered_input(ifm, params.padding)
    wc = centered_weights(params)
    s, k, pad = params.stride, params.k, params.padding
    tiles = output_tiles(plan, (geom.out_ch, geom.h_out, geom.w_out))
    in_chunks = _chunks(geom.in_ch, plan.tn)
    out = np.empty((n, geom.out_ch, geom.h_out, geom.w_out), dtype=np.uint8)

    def fetched(lo, hi, size):
        return max(0, min(hi, pad + size) - max(lo, pad))

    def run(worker, indices):
        records = []
        for i in indices:
            t = tiles[i]
            rs, re = t.r0 * s, (t.r1 - 1) * s + k
            cs, ce = t.c0 * s, (t.c1 - 1) * s + k
            acc = None
            for j, (n0, n1) in enumerate(in_chunks):
                part = conv_partial(xp[:, n0:n1, rs:re, cs:ce], wc[t.m0:t.m1, n0:n1], s)
                acc = part if acc is None else acc + part
                last = j == len(in_chunks) - 1
                records.append(TileRecord(
                    t.index, worker, t.r0, t.r1, t.c0, t.c1, t.m0, t.m1, n0, n1,
                    input_bytes=n * fetched(rs, re, h_in) * fetched(cs, ce, w_in) * (n1 - n0),
                    weight_bytes=(t.m1 - t.m0) * (n1 - n0) * k * k,
                    output_bytes=acc.size if last else 0))
            acc += params.bias[t.m0:t.m1].reshape(1, -1, 1, 1)
            block = finish_layer(acc.astype(np.int32), ifm.qparams, params)
            out[:, t.m0:t.m1, t.r0:t.r1, t.c0:t.c1] = block.data
        return records

    assignment = parallel_schedule(plan, (geom.out_ch, geom.h_out, geom.w_out), workers)
    busy = [(w, idx) for w, idx in enumerate(assignment) if idx]
    if len(busy) <= 1:
        # nothing to overlap; skip the pool
        records = [r for w, idx in busy for r in run(w, idx)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, w, idx) for w, idx in busy]
            records = [r for f in futures for r in f.result()]
    return QuantTensor(out, params.out_qp), ExecutionTrace.from_records(records)
