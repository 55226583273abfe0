"""Loop tiling: what a plan costs, which one to pick, and why the result never changes.

Run: python3 demos/04_tiling.py
"""

import numpy as np

from qhar.fused_ops import FusedLayerParams, fused_layer
from qhar.qtensor import QuantParams, QuantTensor
from qhar.tiling import (LayerGeometry, ResourceModel, TilingPlan, buffer_footprint, estimate_traffic, select_plan,
                         tiled_fused_layer)

geom = LayerGeometry(in_ch=32, out_ch=64, k=3, stride=1, padding=1, h_in=28, w_in=28)

# %% Bigger tiles reuse more data but need more on-chip buffer.
print(f"{'plan':>14}{'footprint':>11}{'traffic':>10}")
for plan in (TilingPlan(1, 1, 1, 1), TilingPlan(7, 7, 8, 16), TilingPlan(14, 28, 32, 64), TilingPlan.full(geom)):
    print(f"{str(plan):>14}{buffer_footprint(plan, geom):>11}{estimate_traffic(plan, geom):>10}")

# %% The selector searches every divisor plan that fits the budget.
for budget in (4_096, 32_768, 262_144):
    plan = select_plan(geom, ResourceModel(budget))
    print(f"budget {budget:>7} B -> plan {plan}, traffic {estimate_traffic(plan, geom)}")

# %% Tiles run on a worker pool; partial sums stay exact, so the bytes match.
rng = np.random.default_rng(2)
ifm = QuantTensor(rng.integers(0, 256, (1, 32, 28, 28), dtype=np.uint8), QuantParams(0.02, 12))
params = FusedLayerParams(QuantTensor(rng.integers(0, 256, (64, 32, 3, 3), dtype=np.uint8), QuantParams(0.004, 131)),
                          rng.integers(-4000, 4000, 64), QuantParams(0.3, 0), padding=1)
plan = select_plan(geom, ResourceModel(32_768))
out, trace = tiled_fused_layer(ifm, params, plan, workers=4)
print("tiled == untiled:", out == fused_layer(ifm, params))
# the cost model charges the zero halo as if fetched; the trace only counts real pixels
print(f"{len(trace.records)} tile steps, {trace.total_bytes} bytes moved, "
      f"model bound {estimate_traffic(plan, geom)}")
