#!/usr/bin/env python3
# Contrastive pre-training in miniature: two augmented views per image, a
# projection head, and the temperature-scaled contrastive loss.

import math

import numpy as np

from hvt.augment import SimclrPolicy, simclr_augment
from hvt.data import generate_synthetic
from hvt.model import HVTConfig, init_params
from hvt.ssl import (PretrainSettings, init_projection_head, nt_xent_loss,
                     pretrain_loop)
from hvt.tensor import RngStream, Tensor

# Two views of one image under the standard policy: crop, color jitter,
# occasional grayscale, blur, flip. Each view draws independently.
_, unlabeled = generate_synthetic(1, size=(64, 64), seed=0, n_unlabeled=64)
pair = simclr_augment(unlabeled.images[0], SimclrPolicy(), RngStream(1))
print("view shapes:", pair.view_a.shape, pair.view_b.shape)
print("view A draws:", {k: round(v, 3) if isinstance(v, float) else v
                        for k, v in pair.params_a.items()})

# The loss: positives are the sibling view, negatives everything else in
# the 2B batch. With all similarities equal it sits at log(2B - 1).
b = 8
flat = Tensor(np.tile(np.array([1.0, 0.0, 0.0]), (2 * b, 1)), dtype=np.float64)
print("\nuniform-similarity loss:", float(nt_xent_loss(flat).numpy()),
      "= log(2B-1) =", math.log(2 * b - 1))

# Pull one positive pair together and the loss drops below that plateau.
emb = np.tile(np.array([1.0, 0.0, 0.0]), (2 * b, 1))
emb[0] = emb[b] = [0.0, 1.0, 0.0]  # pair 0 now agrees and stands apart
print("separated-pair loss:  ", float(nt_xent_loss(Tensor(emb, dtype=np.float64)).numpy()))

# A short pre-training run on the tiny preset. The log carries
# (step, epoch, lr, loss); checkpoints land in --out when given.
cfg = HVTConfig.tiny(drop_path_max=0.0)
rng = RngStream(7)
params = init_params(cfg, rng)
head = init_projection_head(cfg.dims[-1], rng)
settings = PretrainSettings(epochs=8, batch_size=8, accum_steps=2,
                            warmup_epochs=1, max_steps=24)
result = pretrain_loop(params, head, unlabeled.images, cfg, settings,
                       rng.child("loop"))
print("\nstep  epoch   lr        loss")
for row in result.log[::4] + result.log[-1:]:
    print(f"{row['step']:4d}  {row['epoch']:5.2f}  {row['lr']:.2e}  {row['loss']:.4f}")
