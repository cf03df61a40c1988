#!/usr/bin/env python3
# Attention rollout: fold the final stage's attention maps into a single
# token-relevance heatmap over the input image.

import numpy as np

from hvt.data import generate_synthetic
from hvt.model import HVTConfig, attention_rollout, forward, init_params
from hvt.tensor import RngStream, no_grad

# Use a config whose final stage still has a 4x4 grid so the heatmap has
# some spatial structure (stage depths shifted toward the end).
cfg = HVTConfig(input_size=(64, 64), patch_size=2, depths=(1, 1, 1, 2),
                dims=(8, 16, 32, 64), heads=(1, 2, 4, 8),
                drop_path_max=0.0, num_classes=7)
print("final-stage grid:", cfg.grid(3))

params = init_params(cfg, RngStream(0))
labeled, _ = generate_synthetic(1, size=(64, 64), seed=9)
image = labeled.images[0]

# capture="final" records the attention probabilities of every last-stage
# block: one (heads, N, N) array each, rows summing to 1.
with no_grad():
    res = forward(image, params, cfg, capture="final")
for probs, stage in zip(res.record.blocks, res.record.stage_ids):
    print(f"captured stage {stage}: heads x N x N = {probs.shape}, "
          f"row sums ~ {probs.sum(axis=-1).mean():.6f}")

# Per block: average heads, mix with identity, renormalize, multiply the
# chain; token relevance is the column mean, min-max normalized to [0,1].
grid_map, full_map = attention_rollout(res.record)
print("grid map:", grid_map.shape, "full map:", full_map.shape)

shades = " .:-=+*#%@"
print("\nrelevance over the token grid:")
for row in grid_map:
    print("  " + "".join(shades[min(int(v * (len(shades) - 1)), len(shades) - 1)] * 2
                         for v in row))
print("\nvalues min/max:", round(float(full_map.min()), 3),
      round(float(full_map.max()), 3))
