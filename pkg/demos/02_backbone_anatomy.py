#!/usr/bin/env python3
# Walk through the hierarchical backbone: patch embedding, four stages with
# 2x2 patch merging between them, and the GAP + linear head.

import numpy as np

from hvt.model import HVTConfig, count_params, forward, init_params, param_shapes
from hvt.tensor import RngStream, no_grad

# The full-scale preset: 448x448 input, patch 14 -> 32x32 = 1024 tokens.
xl = HVTConfig.xl()
print("XL grids per stage:", [xl.grid(s) for s in range(4)])
print("XL dims per stage: ", xl.dims)
print("XL parameter count: %.1fM" % (sum(
    int(np.prod(s)) for s in param_shapes(xl).values()) / 1e6))

# Everything below runs on the tiny preset so the whole demo is instant.
cfg = HVTConfig.tiny(drop_path_max=0.0)
params = init_params(cfg, RngStream(0))
print("\ntiny preset:", cfg.depths, cfg.dims, "->", count_params(params), "params")

img = np.random.default_rng(0).random((64, 64, 3), dtype=np.float32)
with no_grad():
    res = forward(img, params, cfg)

# Token count divides by 4 at each merge while channels double.
for s, act in enumerate(res.stages):
    print(f"stage {s}: tokens x dim = {act.shape}")
print("logits:", res.logits.shape, "features:", res.features.shape)

# The parameter dict is flat and name-addressable; optimizers, EMA,
# freezing and checkpoints all operate on it directly.
for name in list(params)[:6]:
    print(f"{name:34s} {params[name].shape}")

# Stochastic depth ramps linearly with depth: the last block carries the
# configured maximum.
from hvt.model import drop_path_schedule
total = cfg.total_blocks
print("\ndrop-path schedule:",
      [round(drop_path_schedule(i, total, 0.3), 3) for i in range(1, total + 1)])
