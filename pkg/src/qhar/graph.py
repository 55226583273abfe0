"""Two-stream network: configuration, build from quantized weights, and inference.

Each stream is a chain of fused conv groups with interleaved max-pools,
ending in a fully-connected layer that yields real-valued features. The
spatial stream sees one RGB frame, the temporal stream a 2L-channel flow
stack. A fusion head combines both feature vectors into class logits.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError, WeightMismatchError
from .formats.weights import RecordKind, WeightSet
from .fused_ops import (Activation, FusedLayerParams, check_accumulator_bound, conv_output_size,
                        fully_connected, fused_layer, maxpool, softmax)
from .optflow import FlowStack, flow_qparams
from .qtensor import QuantParams, QuantTensor, dequantize, requantize
from .tiling import LayerGeometry, ResourceModel, TilingPlan, select_plan, tiled_fused_layer

STREAMS = ("spatial", "temporal")
SPATIAL_INPUT_QP = QuantParams(1.0 / 255.0, 0)


class LayerKind(str, enum.Enum):
    FUSED_CONV = "fused_conv"
    MAXPOOL = "maxpool"
    FULLY_CONNECTED = "fully_connected"


class FusionMode(str, enum.Enum):
    LINEAR_CONCAT = "linear_concat"
    WEIGHTED_SUM = "weighted_sum"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_ch: int = 0
    out_ch: int = 0
    k: int = 1
    stride: int = 1
    padding: int = 0
    activation: Activation = Activation.RELU

    @classmethod
    def conv(cls, in_ch, out_ch, k, stride=1, padding=0, activation="relu"):
        return cls(LayerKind.FUSED_CONV, in_ch, out_ch, k, stride, padding, Activation.parse(activation))

    @classmethod
    def pool(cls, k, stride):
        return cls(LayerKind.MAXPOOL, k=k, stride=stride)

    @classmethod
    def fc(cls, in_features, out_features):
        return cls(LayerKind.FULLY_CONNECTED, in_features, out_features)


@dataclass(frozen=True, eq=False)
class FusionSpec:
    """Fusion head. ``weights``/``bias`` are filled in by :func:`build` for linear_concat.

    The linear_concat bias is in units of the weight scale (features are
    treated as unit-scale reals).
    """

    mode: FusionMode = FusionMode.LINEAR_CONCAT
    alpha_spatial: float = 0.5
    alpha_temporal: float = 0.5
    weights: QuantTensor | None = None
    bias: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, FusionSpec):
            return NotImplemented
        same_bias = (self.bias is None) == (other.bias is None) and (
            self.bias is None or np.array_equal(self.bias, other.bias))
        return (self.mode, self.alpha_spatial, self.alpha_temporal, self.weights) == \
            (other.mode, other.alpha_spatial, other.alpha_temporal, other.weights) and same_bias

    __hash__ = None


@dataclass(frozen=True)
class NetworkConfig:
    input_height: int
    input_width: int
    flow_L: int
    spatial_layers: tuple[LayerSpec, ...]
    temporal_layers: tuple[LayerSpec, ...]
    fusion: FusionSpec = field(default_factory=FusionSpec)
    class_count: int = 2
    flow_bound: float = 20.0

    def layers(self, stream: str) -> tuple[LayerSpec, ...]:
        if stream == "spatial":
            return self.spatial_layers
        if stream == "temporal":
            return self.temporal_layers
        raise ValueError(f"unknown stream {stream!r}")

    def input_channels(self, stream: str) -> int:
        return 3 if stream == "spatial" else 2 * self.flow_L

    def input_qparams(self, stream: str) -> QuantParams:
        return SPATIAL_INPUT_QP if stream == "spatial" else flow_qparams(self.flow_bound)

    def feature_len(self) -> int:
        layers = self.spatial_layers
        if layers and layers[-1].kind is LayerKind.FULLY_CONNECTED:
            return layers[-1].out_ch
        return 0


def layer_names(config: NetworkConfig, stream: str) -> list[str | None]:
    """Weight-record names per layer (``None`` for pools): spatial.conv1, spatial.fc1, ..."""
    counts = {LayerKind.FUSED_CONV: 0, LayerKind.FULLY_CONNECTED: 0}
    tags = {LayerKind.FUSED_CONV: "conv", LayerKind.FULLY_CONNECTED: "fc"}
    names = []
    for spec in config.layers(stream):
        if spec.kind is LayerKind.MAXPOOL:
            names.append(None)
        else:
            counts[spec.kind] += 1
            names.append(f"{stream}.{tags[spec.kind]}{counts[spec.kind]}")
    return names


def stream_shapes(config: NetworkConfig, stream: str) -> list[tuple[int, ...]]:
    """Output shape of every layer: (C, H, W) for conv/pool, (F,) for FC.

    Raises ConfigError on any chaining violation.
    """
    shape: tuple[int, ...] = (config.input_channels(stream), config.input_height, config.input_width)
    shapes = []
    for i, spec in enumerate(config.layers(stream), 1):
        where = f"{stream} layer {i} ({spec.kind.value})"
        if spec.kind is LayerKind.FULLY_CONNECTED:
            in_f = math.prod(shape)
            if spec.in_ch != in_f:
                raise ConfigError(f"{where}: expects {spec.in_ch} inputs but receives {in_f} {shape}")
            if spec.out_ch < 1:
                raise ConfigError(f"{where}: out_features must be positive")
            check_accumulator_bound(spec.in_ch, 0, where)
            shape = (spec.out_ch,)
        else:
            if len(shape) != 3:
                raise ConfigError(f"{where}: follows a fully-connected layer")
            c, h, w = shape
            if spec.k < 1 or spec.stride < 1 or spec.padding < 0:
                raise ConfigError(f"{where}: kernel/stride must be >= 1 and padding >= 0")
            if spec.kind is LayerKind.FUSED_CONV:
                if spec.in_ch != c:
                    raise ConfigError(f"{where}: in_ch {spec.in_ch} != incoming channels {c}")
                if spec.out_ch < 1:
                    raise ConfigError(f"{where}: out_ch must be positive")
                check_accumulator_bound(spec.in_ch * spec.k * spec.k, 0, where)
                shape = (spec.out_ch, conv_output_size(h, spec.k, spec.stride, spec.padding),
                         conv_output_size(w, spec.k, spec.stride, spec.padding))
            else:
                if h < spec.k or w < spec.k:
                    raise ConfigError(f"{where}: window {spec.k} larger than input {h}x{w}")
                shape = (c, (h - spec.k) // spec.stride + 1, (w - spec.k) // spec.stride + 1)
            if shape[1] < 1 or shape[2] < 1:
                raise ConfigError(f"{where}: output is empty for input {h}x{w}")
        shapes.append(shape)
    return shapes


def validate_config(config: NetworkConfig) -> NetworkConfig:
    if config.input_height < 1 or config.input_width < 1:
        raise ConfigError("input dimensions must be positive")
    if config.flow_L < 1:
        raise ConfigError("flow L must be >= 1")
    if not (math.isfinite(config.flow_bound) and config.flow_bound > 0):
        raise ConfigError("flow bound must be positive and finite")
    try:
        flow_qparams(config.flow_bound)
    except ValueError as exc:
        raise ConfigError(f"flow bound {config.flow_bound}: {exc}") from None
    if config.class_count < 1:
        raise ConfigError("class count must be positive")
    feats = {}
    for stream in STREAMS:
        layers = config.layers(stream)
        if not layers:
            raise ConfigError(f"{stream} stream has no layers")
        if layers[0].kind is LayerKind.FUSED_CONV and layers[0].in_ch != config.input_channels(stream):
            raise ConfigError(f"{stream} first conv in_ch {layers[0].in_ch} != {config.input_channels(stream)}")
        shapes = stream_shapes(config, stream)
        if layers[-1].kind is not LayerKind.FULLY_CONNECTED:
            raise ConfigError(f"{stream} stream must end in a fully-connected layer")
        feats[stream] = shapes[-1][0]
    if feats["spatial"] != feats["temporal"]:
        raise ConfigError(f"stream feature lengths differ: {feats['spatial']} vs {feats['temporal']}")
    fusion = config.fusion
    if fusion.mode is FusionMode.WEIGHTED_SUM:
        if not (math.isfinite(fusion.alpha_spatial) and math.isfinite(fusion.alpha_temporal)):
            raise ConfigError("fusion alphas must be finite")
        if abs(fusion.alpha_spatial + fusion.alpha_temporal - 1.0) > 1e-9:
            raise ConfigError(
                f"weighted_sum alphas sum to {fusion.alpha_spatial + fusion.alpha_temporal}, must be 1")
        if feats["spatial"] != config.class_count:
            raise ConfigError(f"weighted_sum needs feature length {feats['spatial']} == classes {config.class_count}")
    else:
        check_accumulator_bound(2 * feats["spatial"], 0, "fusion")
    return config


def expected_records(config: NetworkConfig) -> list[tuple[str, RecordKind, tuple[int, ...]]]:
    """(name, kind, weight shape) of every record the config needs, in file order."""
    out = []
    for stream in STREAMS:
        for name, spec in zip(layer_names(config, stream), config.layers(stream)):
            if spec.kind is LayerKind.FUSED_CONV:
                out.append((name, RecordKind.FUSED_CONV, (spec.out_ch, spec.in_ch, spec.k, spec.k)))
            elif spec.kind is LayerKind.FULLY_CONNECTED:
                out.append((name, RecordKind.FULLY_CONNECTED, (spec.out_ch, spec.in_ch)))
    if config.fusion.mode is FusionMode.LINEAR_CONCAT:
        out.append(("fusion", RecordKind.FUSION, (config.class_count, 2 * config.feature_len())))
    return out


def conv_geometries(config: NetworkConfig) -> list[tuple[str, LayerGeometry]]:
    """(record name, tiler geometry) of every conv layer, both streams."""
    out = []
    for stream in STREAMS:
        shapes = stream_shapes(config, stream)
        hw = (config.input_height, config.input_width)
        for name, spec, shape in zip(layer_names(config, stream), config.layers(stream), shapes):
            if spec.kind is LayerKind.FUSED_CONV:
                out.append((name, LayerGeometry(spec.in_ch, spec.out_ch, spec.k, spec.stride,
                                                spec.padding, *hw)))
            if len(shape) == 3:
                hw = shape[1:]
    return out


def parameter_count(config: NetworkConfig) -> int:
    """Weights plus biases of all conv, FC and fusion layers."""
    return sum(math.prod(shape) + shape[0] for _, _, shape in expected_records(config))


@dataclass(frozen=True, eq=False)
class FCLayer:
    weights: QuantTensor
    bias: np.ndarray
    out_qp: QuantParams
    name: str = "fc"


@dataclass(frozen=True)
class PoolLayer:
    k: int
    stride: int


@dataclass(frozen=True, eq=False)
class Network:
    config: NetworkConfig
    streams: Mapping[str, tuple]
    shapes: Mapping[str, tuple]
    fusion: FusionSpec

    def select_plans(self, model: ResourceModel) -> dict[str, TilingPlan]:
        return {name: select_plan(geom, model) for name, geom in conv_geometries(self.config)}

    def uniform_plans(self, plan: TilingPlan) -> dict[str, TilingPlan]:
        return {name: plan for name, _ in conv_geometries(self.config)}


def build(config: NetworkConfig, weights: WeightSet) -> Network:
    """Validate ``config``, match weight records to layers and freeze the network."""
    validate_config(config)
    records = weights.by_name()
    if len(records) != len(weights.records):
        raise WeightMismatchError("duplicate layer names in weight set")
    expected = expected_records(config)
    for name, kind, shape in expected:
        rec = records.get(name)
        if rec is None:
            raise WeightMismatchError(f"{name}: no weight record")
        if rec.kind is not kind:
            raise WeightMismatchError(f"{name}: record kind {rec.kind.name} != expected {kind.name}")
        if rec.dims != shape:
            raise WeightMismatchError(f"{name}: weight shape {rec.dims} != expected {shape}")
        try:
            rec.w_qp, rec.out_qp
        except ValueError as exc:
            raise WeightMismatchError(f"{name}: invalid quantization parameters: {exc}") from None
    extra = set(records) - {name for name, _, _ in expected}
    if extra:
        raise WeightMismatchError(f"{sorted(extra)[0]}: record has no matching layer")

    streams = {}
    for stream in STREAMS:
        layers = []
        for name, spec in zip(layer_names(config, stream), config.layers(stream)):
            if spec.kind is LayerKind.MAXPOOL:
                layers.append(PoolLayer(spec.k, spec.stride))
                continue
            rec = records[name]
            try:
                if spec.kind is LayerKind.FUSED_CONV:
                    layers.append(FusedLayerParams(rec.weight_tensor(), rec.bias, rec.out_qp, spec.activation,
                                                   spec.stride, spec.padding, name))
                else:
                    check_accumulator_bound(spec.in_ch, rec.bias, name)
                    layers.append(FCLayer(rec.weight_tensor(), rec.bias.copy(), rec.out_qp, name))
            except ConfigError as exc:
                raise WeightMismatchError(str(exc)) from None
        streams[stream] = tuple(layers)

    fusion = config.fusion
    if fusion.mode is FusionMode.LINEAR_CONCAT:
        rec = records["fusion"]
        fusion = replace(fusion, weights=rec.weight_tensor(), bias=rec.bias.copy())
    shapes = {s: tuple(stream_shapes(config, s)) for s in STREAMS}
    return Network(config, streams, shapes, fusion)


def _run_conv(x, layer, plans, workers):
    plan = plans.get(layer.name) if plans else None
    if plan is None:
        return fused_layer(x, layer)
    return tiled_fused_layer(x, layer, plan, workers)[0]


def forward_stream(net: Network, stream: str, x: QuantTensor,
                   plans: Mapping[str, TilingPlan] | None = None, workers: int = 1) -> np.ndarray:
    """Run one stream; returns the final FC output dequantized to float64 features.

    Conv layers listed in ``plans`` run tiled on ``workers`` threads.
    """
    expect = (1, net.config.input_channels(stream), net.config.input_height, net.config.input_width)
    if x.shape != expect:
        raise ValueError(f"{stream} input shape {x.shape} != expected {expect}")
    if x.qparams != net.config.input_qparams(stream):
        raise ValueError(f"{stream} input qparams {x.qparams} != expected {net.config.input_qparams(stream)}")
    layers = net.streams[stream]
    for i, layer in enumerate(layers):
        if isinstance(layer, FusedLayerParams):
            x = _run_conv(x, layer, plans, workers)
        elif isinstance(layer, PoolLayer):
            x = maxpool(x, layer.k, layer.stride)
        else:
            acc = fully_connected(x, layer.weights, layer.bias)
            if i == len(layers) - 1:
                return acc[0].astype(np.float64) * (x.qparams.scale * layer.weights.qparams.scale)
            x = requantize(acc, x.qparams, layer.weights.qparams, layer.out_qp)
    raise ValueError(f"{stream} stream does not end in a fully-connected layer")


def fuse(spatial_feats, temporal_feats, spec: FusionSpec) -> np.ndarray:
    s = np.asarray(spatial_feats, dtype=np.float64).ravel()
    t = np.asarray(temporal_feats, dtype=np.float64).ravel()
    if s.shape != t.shape:
        raise ValueError(f"feature lengths differ: {s.size} vs {t.size}")
    if spec.mode is FusionMode.WEIGHTED_SUM:
        return spec.alpha_spatial * s + spec.alpha_temporal * t
    if spec.weights is None or spec.bias is None:
        raise ValueError("linear_concat fusion has no weights")
    w = dequantize(spec.weights)
    if w.shape[1] != 2 * s.size:
        raise ValueError(f"fusion weights expect {w.shape[1]} features, got {2 * s.size}")
    return w @ np.concatenate([s, t]) + spec.bias.astype(np.float64) * spec.weights.qparams.scale


def logits(net: Network, rgb: QuantTensor, flow: FlowStack | QuantTensor,
           plans: Mapping[str, TilingPlan] | None = None, workers: int = 1) -> np.ndarray:
    flow_t = flow.as_tensor() if isinstance(flow, FlowStack) else flow
    s = forward_stream(net, "spatial", rgb, plans, workers)
    t = forward_stream(net, "temporal", flow_t, plans, workers)
    return fuse(s, t, net.fusion)


def predict(net: Network, rgb: QuantTensor, flow: FlowStack | QuantTensor,
            plans: Mapping[str, TilingPlan] | None = None, workers: int = 1) -> tuple[int, np.ndarray]:
    """Class id (lowest index on ties) and softmax probabilities."""
    probs = softmax(logits(net, rgb, flow, plans, workers))
    return int(np.argmax(probs)), probs


def rgb_tensor(frame) -> QuantTensor:
    """(H, W, 3) or (H, W) uint8 image as a 1x3xHxW spatial-stream input."""
    arr = np.asarray(frame, dtype=np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return QuantTensor(arr.transpose(2, 0, 1)[np.newaxis], SPATIAL_INPUT_QP)


def count_ops(config: NetworkConfig) -> int:
    """Multiply and add operations of one prediction (pooling and activations count 0)."""
    total = 0
    for stream in STREAMS:
        c, h, w = config.input_channels(stream), config.input_height, config.input_width
        for spec in config.layers(stream):
            if spec.kind is LayerKind.FUSED_CONV:
                h = conv_output_size(h, spec.k, spec.stride, spec.padding)
                w = conv_output_size(w, spec.k, spec.stride, spec.padding)
                c = spec.out_ch
                total += 2 * spec.k * spec.k * spec.in_ch * spec.out_ch * max(h, 0) * max(w, 0)
            elif spec.kind is LayerKind.MAXPOOL:
                h = (h - spec.k) // spec.stride + 1
                w = (w - spec.k) // spec.stride + 1
            else:
                total += 2 * spec.in_ch * spec.out_ch
    if config.fusion.mode is FusionMode.LINEAR_CONCAT:
        total += 2 * (2 * config.feature_len()) * config.class_count
    return total
