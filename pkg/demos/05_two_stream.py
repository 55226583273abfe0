"""A small two-stream network end to end: export, save, reload, classify.

Run: python3 demos/05_two_stream.py
"""

import tempfile
from pathlib import Path

import numpy as np

from qhar.export import float_predict, random_weightset, smooth_random_inputs
from qhar.formats.weights import read_weights, write_weights
from qhar.graph import FusionMode, FusionSpec, LayerSpec, NetworkConfig, build, count_ops, predict


def stream(cin):
    return (LayerSpec.conv(cin, 8, 3, 1, 1), LayerSpec.pool(2, 2), LayerSpec.conv(8, 16, 3, 1, 1),
            LayerSpec.pool(2, 2), LayerSpec.conv(16, 16, 3, 1, 1), LayerSpec.pool(2, 2), LayerSpec.fc(16 * 4 * 4, 16))


# %% Spatial stream sees RGB, temporal stream sees 2L flow channels.
config = NetworkConfig(32, 32, 2, stream(3), stream(4), FusionSpec(FusionMode.LINEAR_CONCAT), 5)
print(f"{count_ops(config):,} ops per prediction")

# %% A random float network, calibrated and exported to 8-bit records.
fnet, weights = random_weightset(config, seed=4, calibration_samples=128)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "net.qhw"
    write_weights(weights, path)
    print(f"{len(weights)} records, {path.stat().st_size:,} bytes on disk")
    net = build(config, read_weights(path))

# %% Quantized and float predictions side by side.
rng = np.random.default_rng(5)
agree = 0
for i in range(200):
    rgb, flow = smooth_random_inputs(config, rng)
    q_cls, q_p = predict(net, rgb, flow)
    f_cls, f_p = float_predict(fnet, rgb, flow)
    agree += q_cls == f_cls
    if i < 3:
        print(f"input {i}: 8-bit class {q_cls} p={q_p[q_cls]:.3f} | float class {f_cls} p={f_p[f_cls]:.3f}")
print(f"top-1 agreement on 200 inputs: {agree / 2:.1f}%")
