"""Dense Lucas-Kanade flow and the temporal-stream input it feeds.

Run: python3 demos/03_optical_flow.py
"""

import numpy as np

from qhar.optflow import lk_flow, quantize_flow, stack_flows


def pattern(shift, h=48, w=64):
    y, x = np.mgrid[0:h, 0:w].astype(float)
    return np.clip(np.rint(128 + 120 * np.sin((x - shift) / 6.0) * np.cos(y / 6.0)), 0, 255).astype(np.uint8)


# %% A textured pattern sliding right by 1.5 px per frame.
frames = [pattern(1.5 * t) for t in range(4)]
flow = lk_flow(frames[0], frames[1])
inner = (slice(8, -8), slice(8, -8))
print(f"median vx {np.median(flow.vx[inner]):.3f} px, median |vy| {np.median(np.abs(flow.vy[inner])):.3f} px")

# %% Flat regions carry no motion information: the eigenvalue gate zeroes them.
flat = np.full((16, 16), 90, dtype=np.uint8)
print("flat frame pair gives zero flow:", not lk_flow(flat, flat.copy()).vx.any())

# %% Flow becomes 8-bit codes around 128; L fields stack into 2L channels.
print("codes for -20, -1, 0, 1.5, 25 px:", quantize_flow(np.array([-20.0, -1.0, 0.0, 1.5, 25.0]), 20.0).tolist())
stack = stack_flows(frames, L=3)
t = stack.as_tensor()
print(f"stack tensor {t.shape}, x-channel medians {[int(np.median(t.data[0, 2 * i])) for i in range(3)]}")
