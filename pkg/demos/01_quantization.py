"""Affine uint8 quantization, step by step.

Run: python3 demos/01_quantization.py
"""

import numpy as np

from qhar.qtensor import QuantParams, compute_qparams, dequantize, quantize, requantize

# %% A real-valued tensor and the parameters that cover its range.
# The range is widened to include 0 so that zero is exactly representable,
# which is what makes zero padding free in the integer domain.
rng = np.random.default_rng(0)
x = rng.normal(0.5, 1.0, 12)
qp = compute_qparams(float(x.min()), float(x.max()))
print(f"range [{x.min():.3f}, {x.max():.3f}] -> scale {qp.scale:.5f}, zero point {qp.zero_point}")

q = quantize(x, qp)
err = np.abs(dequantize(q) - x)
print("codes:", q.data.tolist())
print(f"worst round-trip error {err.max():.5f} = {err.max() / qp.scale:.3f} steps (at most half a step)")

# %% Ties round to even, like the hardware rounder.
halves = QuantParams(1.0, 0)
print("0.5 1.5 2.5 3.5 ->", quantize(np.array([0.5, 1.5, 2.5, 3.5]), halves).data.tolist())

# %% Requantization: an int32 accumulator back to uint8 under a new scale.
acc = np.array([-300, 0, 250, 251, 10_000], dtype=np.int32)
out = requantize(acc, QuantParams(0.02, 0), QuantParams(0.01, 128), QuantParams(0.05, 0))
print("accumulator", acc.tolist(), "-> codes", out.data.tolist())
