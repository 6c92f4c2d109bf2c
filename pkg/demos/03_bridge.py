"""The cross-modal bridge starts as a pure pass-through and learns to inject text.

Run: python3 demos/03_bridge.py
"""
import numpy as np

from hivg import HiVG, ModelConfig
from hivg.config import replace
from hivg.data import build_arrays, generate
from hivg.model import encode_image
from hivg.tensor import no_grad

cfg = ModelConfig()
specs = generate(3, 4, "relational")
arr = build_arrays(specs, 64, 64, 8)
for s in specs:
    print("query:", s.query)

bridged = HiVG(cfg, seed=1)
plain = HiVG(replace(cfg, bridge_layers=()), seed=1)
with no_grad():
    a, _ = encode_image(plain, arr.pixels, arr.tokens)
    b, _ = encode_image(bridged, arr.pixels, arr.tokens)
print("\nbridges on layers", cfg.bridge_layers, "taps", cfg.visual_taps)
print("fresh bridges still add text-conditioned features:",
      [f"{np.abs(a.data[:, i] - b.data[:, i]).max():.2e}" for i in range(len(cfg.visual_taps))])

# Zeroing the second FFN linear silences a bridge entirely.
for layer in bridged.visual.bridges.values():
    layer.fc2.weight.data[:] = 0
    layer.fc2.bias.data[:] = 0
with no_grad():
    c, _ = encode_image(bridged, arr.pixels, arr.tokens)
print("with zero output weights the encoder is bit-identical to the bridge-free one:",
      np.array_equal(a.data, c.data))

# Re-enable only the last bridge: taps before it cannot notice.
layer = bridged.visual.bridges[str(cfg.bridge_layers[-1])]
layer.fc2.weight.data[:] = np.random.default_rng(0).standard_normal(layer.fc2.weight.shape) * 0.1
with no_grad():
    d, _ = encode_image(bridged, arr.pixels, arr.tokens)
for i, tap in enumerate(cfg.visual_taps):
    print(f"  tap at layer {tap}: max change {np.abs(d.data[:, i] - a.data[:, i]).max():.2e}")
