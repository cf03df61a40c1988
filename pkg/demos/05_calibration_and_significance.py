#!/usr/bin/env python3
# Calibration analysis: reliability bins, expected calibration error,
# post-hoc temperature scaling, and McNemar's paired significance test.

import numpy as np

from hvt.metrics import (PredictionSet, apply_temperature, ece,
                         fit_temperature, mcnemar_test, nll,
                         reliability_bins)

rng = np.random.default_rng(0)

# A perfectly calibrated predictor: labels drawn from the predicted rows.
n, c = 8000, 4
probs = rng.dirichlet(np.ones(c), size=n)
labels = np.array([rng.choice(c, p=row) for row in probs])
calibrated = PredictionSet.from_probs(labels, probs)
print("calibrated sampler ECE:", round(ece(calibrated), 4))

# Sharpen the same predictions and confidence outruns accuracy.
sharp = probs ** 3
sharp /= sharp.sum(axis=1, keepdims=True)
overconfident = PredictionSet.from_probs(labels, sharp)
print("overconfident ECE:     ", round(ece(overconfident), 4))
for row in reliability_bins(overconfident).rows():
    if row["count"]:
        print(f"  bin [{row['lo']:.2f},{row['hi']:.2f}) "
              f"n={row['count']:5d} conf={row['mean_confidence']:.3f} "
              f"acc={row['accuracy']:.3f}")

# Temperature scaling: fit T on held-out logits by NLL, apply everywhere.
# Argmax never changes, so accuracy is untouched while ECE drops.
logits = np.log(np.clip(sharp, 1e-12, None))
t_star, degenerate = fit_temperature(logits, labels)
rescaled = PredictionSet.from_probs(labels, apply_temperature(logits, t_star))
print(f"\nfitted T* = {t_star:.3f} (degenerate={degenerate})")
print("NLL before/after:", round(nll(logits, labels, 1.0), 4),
      round(nll(logits, labels, t_star), 4))
print("ECE before/after:", round(ece(overconfident), 4), round(ece(rescaled), 4))

# McNemar's test looks only at discordant pairs: items one model gets
# right and the other wrong.
truth = rng.integers(0, c, size=300)
model_a = np.where(rng.random(300) < 0.86, truth, (truth + 1) % c)
model_b = np.where(rng.random(300) < 0.74, truth, (truth + 1) % c)
stat, p = mcnemar_test(model_a == truth, model_b == truth)
print(f"\nMcNemar statistic={stat:.2f}, p={p:.4g} "
      f"({'significant' if p < 0.05 else 'not significant'} at 0.05)")
