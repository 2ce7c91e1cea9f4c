"""Shape laws of the model family, from conv blocks to the hybrid ViT.

Run with:  python3 demos/02_models.py
"""

import numpy as np

from canopyheights import nn
from canopyheights.hytec import HyTecConfig, hytec_forward, init_hytec
from canopyheights.tensor import Tensor
from canopyheights.train import make_unet
from canopyheights.unet import _init_cdb, _init_ceb, cdb_forward, ceb_forward, unet_forward

RNG = np.random.default_rng

print("=" * 60)
print("1. Encoder blocks halve space and double channels")
print("=" * 60)

x = Tensor(RNG(0).normal(size=(64, 64, 4)))
enc = ceb_forward(x, _init_ceb(RNG(1), 4))
print("encoder:", x.shape, "->", enc.shape)

skip = Tensor(RNG(2).normal(size=(64, 64, 4)))
dec = cdb_forward(enc, skip, _init_cdb(RNG(3), 8))
print("decoder:", enc.shape, "->", dec.shape, "(skip restores detail)")

print()
print("=" * 60)
print("2. The dual-modality U-Net predicts positive heights")
print("=" * 60)

params, cfg = make_unet("2mdu", RNG(4), stem_width=4)
s2 = Tensor(RNG(5).uniform(0, 1, (32, 32, 10)))
s1 = Tensor(RNG(6).uniform(0, 1, (32, 32, 2)))
out = unet_forward(s2, s1, params, cfg)
print("height map:", out.height.shape,
      " min %.2f m, max %.2f m" % (out.height.data.min(),
                                   out.height.data.max()))
print("class probabilities sum to one:",
      bool(np.allclose(out.probs.data.sum(axis=-1), 1.0)))

print()
print("=" * 60)
print("3. The hybrid transformer: patches -> tokens -> dense map")
print("=" * 60)

hcfg = HyTecConfig.desk_scale(image_size=32, patch=8, embed_dim=32,
                              blocks=4, heads=2, l_hat=16)
hp = init_hytec(RNG(7), hcfg)
img = Tensor(RNG(8).uniform(0, 1, (32, 32, 10)))
ho = hytec_forward(img, hp, hcfg)
print("input          :", img.shape)
print("token grid     : %d x %d patches" % (hcfg.grid, hcfg.grid))
print("main height map:", ho.main.height.shape)
print("aux maps       :", [a.shape for a in ho.aux],
      "(coarse-to-fine distillation targets)")

print()
print("=" * 60)
print("4. At the full configuration the token matrix is 512 x 1536")
print("=" * 60)

full = HyTecConfig()
print("tokens per band group:", full.tokens_per_group)
print("two groups stacked   :", 2 * full.tokens_per_group,
      "x", full.embed_dim)
