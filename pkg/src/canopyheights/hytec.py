"""Hybrid transformer-encoder / convolutional-decoder height model.

Two band groups (10 m bands and upsampled 20 m bands) are patched and
embedded separately, concatenated into one token matrix with a learnable
positional table, and run through a stack of pre-norm transformer blocks.
Four tapped block outputs are reprojected onto the patch grid at four
resolutions, fused along an upsampling pathway with auxiliary height heads
at the three coarse resolutions, and finished by a decoder block plus the
dual classification/regression head at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .losses import HeightBinning
from .tensor import Tensor, concat


@dataclass
class HyTecConfig:
    image_size: int = 256
    patch: int = 16
    embed_dim: int = 1536
    blocks: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    group1_bands: int = 4     # R, G, B, NIR
    group2_bands: int = 6     # red-edge 1-4, SWIR 1-2
    l_hat: int = 256
    taps: tuple = (3, 6, 9, 12)
    bins: Optional[HeightBinning] = None

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image size must be divisible by the patch size")
        if self.embed_dim % self.heads:
            raise ValueError("embed dim must be divisible by the head count")
        if self.patch % 4:
            raise ValueError("patch size must be divisible by 4")
        if self.l_hat % 8:
            raise ValueError("reprojection width must be divisible by 8")
        if len(self.taps) != 4 or any(t < 1 or t > self.blocks for t in self.taps):
            raise ValueError("need 4 tap indices within the block stack")
        g = self.grid
        if g % 2:
            raise ValueError("patch grid side must be even")
        if self.bins is None:
            self.bins = HeightBinning.default()

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_group(self) -> int:
        return self.grid ** 2

    @staticmethod
    def desk_scale(image_size=64, patch=16, embed_dim=64, blocks=4, heads=4,
                   l_hat=32, taps=(1, 2, 3, 4), bins=None) -> "HyTecConfig":
        return HyTecConfig(image_size=image_size, patch=patch,
                           embed_dim=embed_dim, blocks=blocks, heads=heads,
                           l_hat=l_hat, taps=taps, bins=bins)


@dataclass
class TransformerBlockParams:
    ln1: nn.LayerNormParams
    attn: nn.MhsaParams
    ln2: nn.LayerNormParams
    mlp_in: nn.LinearParams
    mlp_out: nn.LinearParams


@dataclass
class RbParams:
    proj: nn.Conv2dParams                 # 1x1, D -> l_hat
    resample: Optional[object] = None     # stage-dependent conv / convT / None


@dataclass
class HyTecParams:
    embed1: nn.LinearParams               # P*P*B1 -> D
    embed2: nn.LinearParams               # P*P*B2 -> D
    pos: Tensor                           # 2N x D learnable table
    blocks: list
    rbs: list                             # 4 RbParams
    fuse_ups: list                        # 3 ConvT (x2) along the fusion pathway
    aux_heads: list                       # 3 x (1x1 conv to 1)
    db_conv1: nn.Conv2dParams
    db_conv2: nn.Conv2dParams
    db_up: nn.ConvT2dParams               # quadruple spatial, channels / 8
    head: object                          # dual head from the unet module


@dataclass
class HyTecOutputs:
    main: object                          # DualHeadOutput at full resolution
    aux: list                             # 3 height maps, coarse to fine


def init_hytec(rng: np.random.Generator, cfg: HyTecConfig) -> HyTecParams:
    from .unet import DualHeadParams

    p, d = cfg.patch, cfg.embed_dim
    n2 = 2 * cfg.tokens_per_group
    blocks = []
    for _ in range(cfg.blocks):
        blocks.append(TransformerBlockParams(
            ln1=nn.init_layernorm(d),
            attn=nn.init_mhsa(rng, d, cfg.heads),
            ln2=nn.init_layernorm(d),
            mlp_in=nn.init_linear(rng, d, cfg.mlp_ratio * d),
            mlp_out=nn.init_linear(rng, cfg.mlp_ratio * d, d)))

    lhat = cfg.l_hat
    rbs = [
        RbParams(nn.init_conv(rng, 1, d, lhat),
                 nn.init_conv(rng, 2, lhat, lhat, stride=2, padding=0)),
        RbParams(nn.init_conv(rng, 1, d, lhat), None),
        RbParams(nn.init_conv(rng, 1, d, lhat), nn.init_convt(rng, 2, lhat, lhat)),
        RbParams(nn.init_conv(rng, 1, d, lhat), nn.init_convt(rng, 4, lhat, lhat)),
    ]
    fuse_ups = [nn.init_convt(rng, 2, lhat, lhat) for _ in range(3)]
    aux_heads = [nn.init_conv(rng, 1, lhat, 1) for _ in range(3)]

    final_up = cfg.patch // 4             # x4 for the 16-pixel patch
    db_up = nn.init_convt(rng, final_up, lhat, lhat // 8)
    k = cfg.bins.k
    head = DualHeadParams(
        conv_cls=nn.init_conv(rng, 1, lhat // 8, k),
        conv_reg=nn.init_conv(rng, 1, lhat // 8, k),
        conv_out=nn.init_conv(rng, 1, k, 1))

    pos_scale = 0.02
    pos = Tensor(rng.normal(scale=pos_scale, size=(n2, d)), requires_grad=True)
    return HyTecParams(
        embed1=nn.init_linear(rng, p * p * cfg.group1_bands, d),
        embed2=nn.init_linear(rng, p * p * cfg.group2_bands, d),
        pos=pos, blocks=blocks, rbs=rbs, fuse_ups=fuse_ups,
        aux_heads=aux_heads,
        db_conv1=nn.init_conv(rng, 3, lhat, lhat, stride=1, padding=1),
        db_conv2=nn.init_conv(rng, 3, lhat, lhat, stride=1, padding=1),
        db_up=db_up, head=head)


# -- forward pieces ---------------------------------------------------

def patch_embed(img_group: Tensor, proj: nn.LinearParams, pos: Tensor,
                patch: int) -> Tensor:
    """Flatten non-overlapping P x P patches row-major and project to D."""
    h, w, b = img_group.shape
    if h % patch or w % patch:
        raise ValueError("image extent not divisible by the patch size")
    gh, gw = h // patch, w // patch
    # (gh, P, gw, P, B) -> (gh, gw, P, P, B) -> (N, P*P*B)
    x = img_group.reshape(gh, patch, gw, patch, b)
    x = x.permute(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * b)
    return nn.linear(x, proj) + pos


def transformer_block(x: Tensor, p: TransformerBlockParams) -> Tensor:
    """Pre-norm block: attention residual then GELU MLP residual."""
    x = x + nn.mhsa(nn.layer_norm(x, p.ln1), p.attn)
    x = x + nn.linear(nn.gelu(nn.linear(nn.layer_norm(x, p.ln2), p.mlp_in)), p.mlp_out)
    return x


def encoder_forward(tokens: Tensor, blocks: Sequence[TransformerBlockParams]) -> list:
    """Run the block stack, retaining every intermediate output."""
    outs = []
    x = tokens
    for blk in blocks:
        x = transformer_block(x, blk)
        outs.append(x)
    return outs


def spatial_concat(tokens: Tensor, grid: int) -> Tensor:
    """Row-major reshape of an N x D token matrix onto the G x G patch grid."""
    n, d = tokens.shape
    if n != grid * grid:
        raise ValueError(f"{n} tokens do not form a {grid}x{grid} grid")
    return tokens.reshape(grid, grid, d)


def rb_forward(f: Tensor, stage: int, p: RbParams) -> Tensor:
    """Reproject a G x G x D grid to the stage resolution with l_hat channels.

    Stage 1 halves the grid, stage 2 keeps it, stages 3 and 4 upsample by
    2x and 4x respectively.
    """
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"invalid reprojection stage {stage}")
    y = nn.conv2d(f, p.proj)
    g = f.shape[0]
    if stage == 1:
        y = nn.conv2d(y, p.resample)
        expect = g // 2
    elif stage == 2:
        expect = g
    elif stage == 3:
        y = nn.conv2d_transpose(y, p.resample)
        expect = 2 * g
    else:
        y = nn.conv2d_transpose(y, p.resample)
        expect = 4 * g
    assert y.shape[:2] == (expect, expect), f"reprojection shape law violated: {y.shape}"
    return y


def db_forward(f: Tensor, conv1: nn.Conv2dParams, conv2: nn.Conv2dParams,
               up: nn.ConvT2dParams) -> Tensor:
    """Decoder block: two 3x3 convs then a transpose conv that multiplies the
    spatial extent by its stride and divides the channels by eight."""
    h, w, c = f.shape
    if c % 8:
        raise ValueError("decoder block needs channels divisible by 8")
    y = nn.conv2d(nn.conv2d(f, conv1), conv2)
    y = nn.conv2d_transpose(y, up)
    s = up.stride
    assert y.shape == (s * h, s * w, c // 8), f"decoder shape law violated: {y.shape}"
    return y


def hytec_forward(s2: Tensor, params: HyTecParams, cfg: HyTecConfig) -> HyTecOutputs:
    """Full forward from a 10-band optical tile to main + auxiliary outputs."""
    from .unet import head_dual

    h, w, c = s2.shape
    if h != w or h % cfg.patch:
        raise ValueError("input must be square and divisible by the patch size")
    if c != cfg.group1_bands + cfg.group2_bands:
        raise ValueError(f"expected {cfg.group1_bands + cfg.group2_bands} bands, got {c}")

    n = cfg.tokens_per_group if cfg.image_size == h else (h // cfg.patch) ** 2
    g = h // cfg.patch
    t1 = patch_embed(s2[:, :, :cfg.group1_bands], params.embed1, params.pos[:n], cfg.patch)
    t2 = patch_embed(s2[:, :, cfg.group1_bands:], params.embed2, params.pos[n:2 * n], cfg.patch)
    tokens = concat([t1, t2], axis=0)

    layer_outs = encoder_forward(tokens, params.blocks)

    # only the group-1 tokens feed the decoder
    reproj = []
    for stage, tap in enumerate(cfg.taps, start=1):
        tapped = layer_outs[tap - 1][:n, :]
        reproj.append(rb_forward(spatial_concat(tapped, g), stage, params.rbs[stage - 1]))

    # fusion pathway: upsample each level by 2 and add the next reprojection
    aux = []
    fused = reproj[0]                               # G/2
    for i in range(3):
        fused = nn.conv2d_transpose(fused, params.fuse_ups[i]) + reproj[i + 1]
        aux_map = nn.softplus(nn.conv2d(fused, params.aux_heads[i]))
        aux.append(aux_map.reshape(aux_map.shape[0], aux_map.shape[1]))

    full = db_forward(fused, params.db_conv1, params.db_conv2, params.db_up)
    assert full.shape[:2] == (h, w), "main output must match the input extent"
    main = head_dual(full, params.head)
    return HyTecOutputs(main=main, aux=aux)
