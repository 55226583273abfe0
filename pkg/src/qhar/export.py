"""Float reference network and post-training export to quantized weight records.

The exporter folds batch-norm into the conv weights, runs the float network
over calibration inputs to fix every activation range, then quantizes
weights per tensor and biases into the accumulator domain.

Weights are rounded one input column at a time, each rounding error being
pushed onto the columns not yet rounded in proportion to the calibration
input covariance (the GPTQ error-feedback scheme). The remaining mean
output shift is then absorbed by the bias.

Random networks for testing additionally get batch-norm statistics taken
from calibration data and cross-layer range equalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .formats.weights import RecordKind, WeightRecord, WeightSet
from .fused_ops import Activation, BNParams, conv2d_float, fold_bn, softmax
from .graph import (STREAMS, FusionMode, LayerKind, NetworkConfig, PoolLayer, layer_names,
                    validate_config)
from .qtensor import QuantParams, QuantTensor, compute_qparams, dequantize, quantize

_I32 = np.iinfo(np.int32)
_CHUNK = 8


@dataclass
class FloatConv:
    name: str
    weights: np.ndarray
    bias: np.ndarray
    bn: BNParams | None = None
    activation: Activation = Activation.RELU
    stride: int = 1
    padding: int = 0

    def folded(self):
        if self.bn is None:
            return self.weights, self.bias
        return fold_bn(self.weights, self.bias, self.bn)

    def fold_in_place(self):
        self.weights, self.bias = self.folded()
        self.bn = None


@dataclass
class FloatFC:
    name: str
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class FloatNetwork:
    config: NetworkConfig
    streams: dict[str, list] = field(default_factory=dict)
    fusion_weights: np.ndarray | None = None
    fusion_bias: np.ndarray | None = None


def activate(x, kind: Activation):
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    if kind is Activation.LEAKY_RELU_0P1:
        return np.where(x >= 0, x, 0.1 * x)
    return x


def random_float_network(config: NetworkConfig, rng: np.random.Generator) -> FloatNetwork:
    """He-initialized conv/FC weights with random batch-norm statistics."""
    validate_config(config)
    net = FloatNetwork(config)
    for stream in STREAMS:
        layers = []
        for name, spec in zip(layer_names(config, stream), config.layers(stream)):
            if spec.kind is LayerKind.MAXPOOL:
                layers.append(PoolLayer(spec.k, spec.stride))
            elif spec.kind is LayerKind.FUSED_CONV:
                fan_in = spec.in_ch * spec.k * spec.k
                m = spec.out_ch
                bn = BNParams(gamma=rng.uniform(0.5, 1.5, m), beta=rng.normal(0.0, 0.1, m),
                              mu=rng.normal(0.0, 0.1, m), sigma2=rng.uniform(0.5, 2.0, m))
                layers.append(FloatConv(
                    name, rng.normal(0.0, np.sqrt(2.0 / fan_in), (m, spec.in_ch, spec.k, spec.k)),
                    rng.normal(0.0, 0.1, m), bn, spec.activation, spec.stride, spec.padding))
            else:
                layers.append(FloatFC(name, rng.normal(0.0, np.sqrt(1.0 / spec.in_ch), (spec.out_ch, spec.in_ch)),
                                      rng.normal(0.0, 0.1, spec.out_ch)))
        net.streams[stream] = layers
    if config.fusion.mode is FusionMode.LINEAR_CONCAT:
        feats = 2 * config.feature_len()
        net.fusion_weights = rng.normal(0.0, np.sqrt(1.0 / feats), (config.class_count, feats))
        net.fusion_bias = rng.normal(0.0, 0.1, config.class_count)
    return net


def _conv(x, w, b, stride, padding):
    # chunked over the batch to bound the im2col buffer
    return np.concatenate([conv2d_float(x[i:i + _CHUNK], w, b, stride, padding)
                           for i in range(0, x.shape[0], _CHUNK)])


def _pool(x, layer: PoolLayer):
    win = sliding_window_view(x, (layer.k, layer.k), axis=(2, 3))[:, :, ::layer.stride, ::layer.stride]
    return win.max(axis=(4, 5))


def _apply(layer, x):
    if isinstance(layer, FloatConv):
        w, b = layer.folded()
        return activate(_conv(x, w, b, layer.stride, layer.padding), layer.activation)
    if isinstance(layer, PoolLayer):
        return _pool(x, layer)
    return x.reshape(x.shape[0], -1) @ layer.weights.T + layer.bias


def _run_batch(net: FloatNetwork, stream: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    for layer in net.streams[stream]:
        x = _apply(layer, x)
    return x


def _as_batch(inputs, index: int) -> np.ndarray:
    return np.concatenate([dequantize(s[index]) if isinstance(s[index], QuantTensor) else
                           np.asarray(s[index], dtype=np.float64) for s in inputs])


def float_forward_stream(net: FloatNetwork, stream: str, x, ranges: dict | None = None) -> np.ndarray:
    """Float forward pass on a real-valued NCHW input (batch 1).

    If ``ranges`` is given, the running (min, max) of each conv/FC output is
    recorded under the layer name.
    """
    x = np.asarray(x, dtype=np.float64)
    for layer in net.streams[stream]:
        x = _apply(layer, x)
        if ranges is not None and not isinstance(layer, PoolLayer):
            lo, hi = ranges.get(layer.name, (np.inf, -np.inf))
            ranges[layer.name] = (min(lo, float(x.min())), max(hi, float(x.max())))
    return x.reshape(-1)


def float_logits(net: FloatNetwork, rgb, flow) -> np.ndarray:
    """Float logits for real-valued inputs (arrays or quantized tensors, which are dequantized)."""
    rgb = dequantize(rgb) if isinstance(rgb, QuantTensor) else rgb
    flow = dequantize(flow) if isinstance(flow, QuantTensor) else flow
    s = float_forward_stream(net, "spatial", rgb)
    t = float_forward_stream(net, "temporal", flow)
    fusion = net.config.fusion
    if fusion.mode is FusionMode.WEIGHTED_SUM:
        return fusion.alpha_spatial * s + fusion.alpha_temporal * t
    return net.fusion_weights @ np.concatenate([s, t]) + net.fusion_bias


def float_predict(net: FloatNetwork, rgb, flow) -> tuple[int, np.ndarray]:
    probs = softmax(float_logits(net, rgb, flow))
    return int(np.argmax(probs)), probs


def calibrate_batch_norm(net: FloatNetwork, inputs) -> None:
    """Set every batch-norm's (mu, sigma2) to the statistics its conv produces on ``inputs``.

    This is the state a trained network's running statistics converge to.
    """
    for index, stream in enumerate(STREAMS):
        x = _as_batch(inputs, index)
        for layer in net.streams[stream]:
            if isinstance(layer, FloatConv) and layer.bn is not None:
                pre = _conv(x, layer.weights, layer.bias, layer.stride, layer.padding)
                bn = layer.bn
                layer.bn = BNParams(bn.gamma, bn.beta, pre.mean(axis=(0, 2, 3)), pre.var(axis=(0, 2, 3)),
                                    bn.epsilon)
            x = _apply(layer, x)


def center_fusion_bias(net: FloatNetwork, inputs) -> None:
    """Shift the fusion bias so every class logit averages zero over ``inputs``."""
    if net.fusion_weights is None:
        return
    feats = [_run_batch(net, stream, _as_batch(inputs, i)) for i, stream in enumerate(STREAMS)]
    z = np.concatenate(feats, axis=1) @ net.fusion_weights.T + net.fusion_bias
    net.fusion_bias = net.fusion_bias - z.mean(axis=0)


def _parametric(net: FloatNetwork, stream: str) -> list:
    return [l for l in net.streams[stream] if not isinstance(l, PoolLayer)]


def equalize_ranges(net: FloatNetwork, iterations: int = 4) -> None:
    """Cross-layer range equalization.

    For each conv followed by another parametric layer, output channel c of
    the first is divided by s_c and the matching input channel of the second
    multiplied by s_c, with s_c chosen so both weight ranges become
    sqrt(r1 * r2). ReLU, leaky ReLU and max-pool commute with positive
    per-channel scaling, so the float function is unchanged. Batch-norm is
    folded first.
    """
    for stream in STREAMS:
        layers = _parametric(net, stream)
        for layer in layers:
            if isinstance(layer, FloatConv):
                layer.fold_in_place()
        for _ in range(iterations):
            for a, b in zip(layers, layers[1:]):
                if not isinstance(a, FloatConv):
                    continue
                c = a.weights.shape[0]
                r1 = np.abs(a.weights).reshape(c, -1).max(axis=1)
                # FC columns are flattened (C, H, W): group them by channel
                r2 = np.abs(b.weights.reshape(b.weights.shape[0], c, -1)).max(axis=(0, 2))
                ok = (r1 > 0) & (r2 > 0)
                s = np.ones(c)
                s[ok] = np.sqrt(r1[ok] * r2[ok]) / r2[ok]
                a.weights = a.weights / s.reshape(-1, 1, 1, 1)
                a.bias = a.bias / s
                shape = b.weights.shape
                b.weights = (b.weights.reshape(shape[0], c, -1) * s.reshape(1, -1, 1)).reshape(shape)


def _f32_qparams(lo: float, hi: float) -> QuantParams:
    qp = compute_qparams(lo, hi)
    return QuantParams(float(np.float32(qp.scale)), qp.zero_point)


def _patches(x, layer):
    """Layer input as rows of the weight matrix's column space."""
    if isinstance(layer, FloatConv):
        k = layer.weights.shape[2]
        p = layer.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::layer.stride, ::layer.stride]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, x.shape[1] * k * k)
    return x.reshape(x.shape[0], -1)


def _input_moments(x, layer):
    """Second-moment matrix and mean of the layer's input patches."""
    d = x[0].size if not isinstance(layer, FloatConv) else x.shape[1] * layer.weights.shape[2] ** 2
    gram, total, rows = np.zeros((d, d)), np.zeros(d), 0
    for i in range(0, x.shape[0], _CHUNK):
        cols = _patches(x[i:i + _CHUNK], layer)
        gram += cols.T @ cols
        total += cols.sum(axis=0)
        rows += cols.shape[0]
    return gram / rows, total / rows


def round_with_feedback(w2d, gram, qp: QuantParams, damping: float = 0.01) -> np.ndarray:
    """Round ``w2d`` (out, in) onto the grid of ``qp`` column by column.

    Each column's rounding error is spread over the later columns through the
    upper Cholesky factor of the inverse (damped) input second moment, which
    minimizes the layer's expected squared output error given the rounding so
    far. Returns uint8 codes.
    """
    w = np.array(w2d, dtype=np.float64)
    d = w.shape[1]
    h = np.array(gram, dtype=np.float64)
    h[np.diag_indices(d)] += damping * max(float(np.mean(np.diag(h))), 1e-12)
    u = np.linalg.cholesky(np.linalg.inv(h)).T
    codes = np.empty(w.shape)
    for j in range(d):
        codes[:, j] = np.clip(np.rint(w[:, j] / qp.scale) + qp.zero_point, 0, 255)
        err = (w[:, j] - (codes[:, j] - qp.zero_point) * qp.scale) / u[j, j]
        w[:, j + 1:] -= np.outer(err, u[j, j + 1:])
    return codes.astype(np.uint8)


def _quantize_weights(w, moments=None) -> QuantTensor:
    qp = _f32_qparams(float(w.min()), float(w.max()))
    if moments is None:
        return quantize(w, qp)
    w2d = w.reshape(w.shape[0], -1)
    codes = round_with_feedback(w2d, moments[0], qp)
    return QuantTensor(codes.reshape(w.shape), qp)


def _corrected_bias(b, w, wq: QuantTensor, moments):
    dw = (dequantize(wq) - w).reshape(w.shape[0], -1)
    return b - dw @ moments[1]


def _acc_bias(b, scale: float) -> np.ndarray:
    return np.clip(np.rint(np.asarray(b) / scale), _I32.min, _I32.max).astype(np.int32)


def random_inputs(config: NetworkConfig, rng: np.random.Generator) -> tuple[QuantTensor, QuantTensor]:
    """One (rgb, flow) input pair of i.i.d. uniform codes."""
    h, w = config.input_height, config.input_width
    rgb = QuantTensor(rng.integers(0, 256, (1, 3, h, w), dtype=np.uint8), config.input_qparams("spatial"))
    flow = QuantTensor(rng.integers(0, 256, (1, 2 * config.flow_L, h, w), dtype=np.uint8),
                       config.input_qparams("temporal"))
    return rgb, flow


def _smooth_field(rng, channels: int, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinear upsampling of a uniform [0, 1) grid with ``cell``-pixel spacing."""
    grid = rng.uniform(0.0, 1.0, (channels, -(-h // cell) + 1, -(-w // cell) + 1))
    y, x = np.arange(h) / cell, np.arange(w) / cell
    y0, x0 = y.astype(int), x.astype(int)
    fy, fx = (y - y0)[:, None], (x - x0)[None, :]
    g00, g01 = grid[:, y0][:, :, x0], grid[:, y0][:, :, x0 + 1]
    g10, g11 = grid[:, y0 + 1][:, :, x0], grid[:, y0 + 1][:, :, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def smooth_random_inputs(config: NetworkConfig, rng: np.random.Generator,
                         cells=(4, 8)) -> tuple[QuantTensor, QuantTensor]:
    """Spatially correlated random (rgb, flow) pair, closer to real frames than pixel noise.

    Each image is a random coarse grid (spacing drawn from ``cells``)
    upsampled bilinearly; flow codes span most of [8, 248] around 128.
    """
    h, w = config.input_height, config.input_width
    cell = int(rng.choice(cells))
    rgb = np.rint(255.0 * _smooth_field(rng, 3, h, w, cell))
    flow = np.rint(128.0 + 120.0 * (2.0 * _smooth_field(rng, 2 * config.flow_L, h, w, cell) - 1.0))
    return (QuantTensor(rgb.astype(np.uint8)[np.newaxis], config.input_qparams("spatial")),
            QuantTensor(flow.astype(np.uint8)[np.newaxis], config.input_qparams("temporal")))


def export_weights(net: FloatNetwork, calibration, calibrated_rounding: bool = True) -> WeightSet:
    """Quantize ``net`` using activation ranges observed on ``calibration``.

    ``calibration`` is a sequence of (rgb, flow) inputs. With
    ``calibrated_rounding`` weights are rounded with error feedback and each
    bias absorbs the expected output shift ``dW . E[x]`` left by rounding.
    Without it weights are rounded to nearest and biases kept as is.
    """
    config = net.config
    calibration = list(calibration)
    if not calibration:
        raise ValueError("calibration set is empty")

    records = []
    features = []
    for index, stream in enumerate(STREAMS):
        in_qp = config.input_qparams(stream)
        last = _parametric(net, stream)[-1]
        x = _as_batch(calibration, index)
        for layer in net.streams[stream]:
            y = _apply(layer, x)
            if not isinstance(layer, PoolLayer):
                if isinstance(layer, FloatConv):
                    w, b = layer.folded()
                    kind = RecordKind.FUSED_CONV
                else:
                    w, b = layer.weights, layer.bias
                    kind = RecordKind.FULLY_CONNECTED
                moments = _input_moments(x, layer) if calibrated_rounding else None
                wq = _quantize_weights(w, moments)
                if moments is not None:
                    b = _corrected_bias(b, w, wq, moments)
                out_qp = QuantParams(1.0, 0) if layer is last else _f32_qparams(float(y.min()), float(y.max()))
                records.append(WeightRecord(layer.name, kind, wq.data,
                                            _acc_bias(b, in_qp.scale * wq.qparams.scale),
                                            wq.qparams.scale, wq.qparams.zero_point,
                                            out_qp.scale, out_qp.zero_point))
                in_qp = out_qp
            x = y
        features.append(x)
    if config.fusion.mode is FusionMode.LINEAR_CONCAT:
        w, b = net.fusion_weights, net.fusion_bias
        feats = np.concatenate(features, axis=1)
        moments = (feats.T @ feats / len(feats), feats.mean(axis=0)) if calibrated_rounding else None
        wq = _quantize_weights(w, moments)
        if moments is not None:
            b = _corrected_bias(b, w, wq, moments)
        records.append(WeightRecord("fusion", RecordKind.FUSION, wq.data, _acc_bias(b, wq.qparams.scale),
                                    wq.qparams.scale, wq.qparams.zero_point))
    return WeightSet(records)


def random_weightset(config: NetworkConfig, seed: int = 0, calibration_samples: int = 32,
                     inputs=smooth_random_inputs):
    """Random calibrated float network plus its quantized export: ``(FloatNetwork, WeightSet)``.

    ``inputs(config, rng)`` draws one calibration pair. Batch-norm statistics,
    the fusion bias and activation ranges all come from the same draws.
    """
    rng = np.random.default_rng(seed)
    net = random_float_network(config, rng)
    calib = [inputs(config, rng) for _ in range(calibration_samples)]
    calibrate_batch_norm(net, calib)
    center_fusion_bias(net, calib)
    equalize_ranges(net)
    return net, export_weights(net, calib)
