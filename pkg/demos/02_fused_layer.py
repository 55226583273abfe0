"""Conv + batch-norm + ReLU as a single integer layer.

Run: python3 demos/02_fused_layer.py
"""

import numpy as np

from qhar.fused_ops import BNParams, FusedLayerParams, batch_norm, conv2d_float, fold_bn, fused_layer
from qhar.qtensor import compute_qparams, dequantize, quantize

rng = np.random.default_rng(1)
x = rng.uniform(0.0, 1.0, (1, 3, 8, 8))
w = rng.normal(0.0, 0.3, (4, 3, 3, 3))
b = rng.normal(0.0, 0.1, 4)
bn = BNParams(gamma=rng.uniform(0.5, 1.5, 4), beta=rng.normal(0.0, 0.1, 4),
              mu=rng.normal(0.0, 0.1, 4), sigma2=rng.uniform(0.5, 2.0, 4))

# %% Folding: scale each output channel's weights, shift its bias.
reference = np.maximum(batch_norm(conv2d_float(x, w, b, 1, 1), bn), 0.0)
wf, bf = fold_bn(w, b, bn)
folded = np.maximum(conv2d_float(x, wf, bf, 1, 1), 0.0)
print(f"folded vs conv->BN->ReLU: max difference {np.abs(folded - reference).max():.2e}")

# %% Quantize everything and run the integer layer.
xq = quantize(x, compute_qparams(float(x.min()), float(x.max())))
wq = quantize(wf, compute_qparams(float(wf.min()), float(wf.max())))
bias = np.rint(bf / (xq.qparams.scale * wq.qparams.scale)).astype(np.int64)
out_qp = compute_qparams(0.0, float(reference.max()))
params = FusedLayerParams(wq, bias, out_qp, "relu", stride=1, padding=1)
y = dequantize(fused_layer(xq, params))

err = np.abs(y - reference) / out_qp.scale
print(f"8-bit layer vs float: mean error {err.mean():.2f} steps, worst {err.max():.2f} steps")
print("output codes, channel 0 row 0:", fused_layer(xq, params).data[0, 0, 0].tolist())
