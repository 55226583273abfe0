"""The qhar command line on a throwaway workspace.

Run: python3 demos/06_cli_walkthrough.py
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from qhar.cli import main
from qhar.export import random_weightset
from qhar.formats.config import format_config
from qhar.formats.frames import write_frame
from qhar.formats.weights import write_weights
from qhar.graph import FusionMode, FusionSpec, LayerSpec, NetworkConfig


def stream(cin):
    return (LayerSpec.conv(cin, 8, 3, 1, 1), LayerSpec.pool(2, 2), LayerSpec.conv(8, 16, 3, 1, 1),
            LayerSpec.pool(4, 4), LayerSpec.fc(16 * 4 * 4, 8))


def run(*argv):
    print("\n$ qhar", " ".join(str(a) for a in argv))
    sys.stdout.flush()
    code = main([str(a) for a in argv])
    sys.stderr.flush()
    print(f"[exit {code}]")


root = Path(tempfile.mkdtemp(prefix="qhar-demo-"))
config = NetworkConfig(32, 32, 2, stream(3), stream(4), FusionSpec(FusionMode.LINEAR_CONCAT), 4)
(root / "net.cfg").write_text(format_config(config))
write_weights(random_weightset(config, seed=1)[1], root / "net.qhw")
(root / "frames").mkdir()
y, x = np.mgrid[0:32, 0:32].astype(float)
for t in range(6):
    base = 128 + 100 * np.sin((x - t) / 4.0) * np.cos(y / 5.0)
    img = np.stack([base, 255 - base, np.full_like(base, 60)], axis=-1)
    write_frame(np.clip(np.rint(img), 0, 255).astype(np.uint8), root / "frames" / f"frame_{t:03d}.ppm")

net = ["--config", root / "net.cfg", "--weights", root / "net.qhw"]
run("validate", *net)
run("plan", "--config", root / "net.cfg", "--budget", 8192)
run("infer", *net, "--frames", root / "frames", "--workers", 2)
run("bench", *net, "--frames", root / "frames", "--repeat", 3)
run("flow", "--frames", root / "frames", "--out", root / "flow")
run("plan", "--config", root / "net.cfg", "--budget", 16)
print(f"\nworkspace left in {root}")
