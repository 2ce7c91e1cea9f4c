"""The loss family: robust regression, soft binning, and the mixture.

Run with:  python3 demos/03_losses.py
"""

import numpy as np

from canopyheights.losses import (AdaptiveLossState, HeightBinning,
                                  adaptive_loss, batch_class_weights,
                                  bin_assign, bin_assign_map, huber,
                                  weighted_cross_entropy)
from canopyheights.tensor import Tensor

print("=" * 60)
print("1. Huber: quadratic near zero, linear in the tails")
print("=" * 60)

for r in (1.0, 3.0, 10.0):
    pred = Tensor(np.array([[r]]))
    val = huber(pred, np.zeros((1, 1)), np.ones((1, 1)), delta=3.0).item()
    print(f"residual {r:5.1f} -> loss {val:7.3f}")
print("both branches meet at |r| = delta = 3 with value 4.5 (C1 smooth)")

print()
print("=" * 60)
print("2. The adaptive loss interpolates whole loss families")
print("=" * 60)

r = Tensor(np.linspace(-6, 6, 13))
for alpha in (2.0, 1.0, 0.0, -2.0):
    st = AdaptiveLossState.create(alpha=alpha, c=1.0)
    print(f"alpha {alpha:+.1f} -> mean loss {adaptive_loss(r, st).item():.4f}")
print("alpha=2 is L2, alpha=0 is Cauchy-like, negative alphas saturate")
print("alpha and the scale are Tensors, so they can be trained too")

print()
print("=" * 60)
print("3. Heights become soft class targets via overlapping bins")
print("=" * 60)

bins = HeightBinning.default()
for h in (9.0, 5.0, 120.0):
    print(f"height {h:6.1f} m -> bin mass {np.round(bin_assign(h, bins), 2)}")
print("heights inside an overlap split their mass between two bins")

print()
print("=" * 60)
print("4. Inverse-frequency weights rebalance rare tall classes")
print("=" * 60)

heights = np.array([[2.0, 2.0], [2.0, 40.0]])
tgt = bin_assign_map(heights, np.ones((2, 2), dtype=bool), bins)
w = batch_class_weights(tgt)
print("heights:", heights.ravel())
print("weights:", np.round(w, 2), " (the lone 40 m pixel counts 3x more)")

raw = np.random.default_rng(0).uniform(0.1, 1.0, (2, 2, bins.k))
probs = Tensor(raw / raw.sum(axis=-1, keepdims=True))
print("weighted cross-entropy:",
      round(weighted_cross_entropy(probs, tgt, w).item(), 4))
