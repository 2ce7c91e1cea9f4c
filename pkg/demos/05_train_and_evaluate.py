"""Train a small model end to end, then score and size its output.

Run with:  python3 demos/05_train_and_evaluate.py   (about a minute)
"""

import numpy as np

from canopyheights import datapipe as dp
from canopyheights import metrics as mx
from canopyheights import train as tr

print("=" * 60)
print("1. Synthesize a small dataset and train a compact U-Net")
print("=" * 60)

tiles = dp.synth_dataset(6, 32, seed=3, shots_per_tile=120,
                         violation_rate=0.0)
samples = tr.samples_from_tiles(tiles)
settings = tr.TrainSettings(arch="2mdu", epochs=30, batch_size=3, seed=0,
                            stem_width=4, base_lr=1e-2)
res = tr.train_unet(samples[:4], settings)
print("loss: %.4f -> %.4f over %d steps"
      % (res.trace[0][2], res.trace[-1][2], len(res.trace)))

print()
print("=" * 60)
print("2. Evaluate on held-out tiles")
print("=" * 60)

ys, yhats = [], []
for s in samples[4:]:
    pred = tr.predict_heights(res.params, res.config, s)
    sel = s.mask > 0
    ys.append(s.target_h[sel])
    yhats.append(pred[sel])
y, yhat = np.concatenate(ys), np.concatenate(yhats)
rep = mx.summary_stats(y, yhat)
print(f"n {rep.n}, rmse {rep.rmse:.2f} m, bias {rep.bias:+.2f} m, "
      f"r {rep.r:.3f}" if rep.r is not None else "n/a")

print()
print("error decomposition (mse = bias^2 + SDSD + LCS):")
b2, sdsd, lcs, _ = mx.msd_decomposition(y, yhat)
print(f"  bias^2 {b2:.3f} + sdsd {sdsd:.3f} + lcs {lcs:.3f} "
      f"= {b2 + sdsd + lcs:.3f}")

print()
print("=" * 60)
print("3. How sharp is the predicted map? (effective resolution)")
print("=" * 60)

sample = samples[4]
pred = tr.predict_heights(res.params, res.config, sample)
g = mx.gsi(pred, sample.s2)
print(f"output blur {g.si_output:.3f}, reference blur {g.si_reference:.3f}")
print(f"gsi {g.gsi:.3f} -> effective resolution "
      f"{g.effective_resolution_m:.1f} m")
print("a gsi of 1 means the map is as sharp as its input imagery")
