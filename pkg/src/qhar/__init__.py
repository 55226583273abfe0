"""Quantized two-stream action recognition runtime."""

from .fused_ops import (Activation, BNParams, FusedLayerParams, apply_activation, conv2d_acc, fold_bn,
                        fully_connected, fused_layer, maxpool, softmax)
from .graph import (FusionMode, FusionSpec, LayerKind, LayerSpec, Network, NetworkConfig, build, count_ops,
                    forward_stream, fuse, predict)
from .metrics import Metrics, compute_metrics
from .optflow import FlowField, FlowStack, gradients, lk_flow, stack_flows
from .qtensor import QuantParams, QuantTensor, compute_qparams, dequantize, quantize, requantize
from .tiling import (ExecutionTrace, ResourceModel, TilingPlan, buffer_footprint, parallel_schedule,
                     select_plan, tiled_fused_layer)

__version__ = "0.1.0"
