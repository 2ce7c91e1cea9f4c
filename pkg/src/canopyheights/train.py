"""Training loops for the convolutional models and the distilled hybrid
model.

Convolutional variants train with SGD plus cosine decay; the hybrid model
trains with AdamW under a linear warmup followed by cosine decay, against
a mix of sparse LiDAR targets and consensus maps from two frozen
single-modality teachers.  Loops emit a per-step loss trace, checkpoint
every epoch with a rolling keep-last window, and abort on non-finite loss.
"""

from __future__ import annotations

import csv
import os
import re
import shutil
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn, optim
from .hytec import HyTecConfig, HyTecParams, hytec_forward, init_hytec
from .losses import (AdaptiveLossState, ClassTarget, HyTecLossConfig,
                     bin_assign_map, combined_cr_loss, huber,
                     hytec_total_loss, kd_teacher_consensus)
from .tensor import Tape, Tensor, backward
from .unet import (DualHeadOutput, UNetConfig, UNetParams, init_unet,
                   teacher_config, unet_forward)

UNET_ARCHS = ("2mou", "2mdu", "a2mdu", "teacher_s1", "teacher_s2")
TRACE_COLUMNS = ["step", "lr", "total", "aux1", "aux2", "aux3", "ce", "reg"]


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries diagnostics."""


@dataclass
class Sample:
    """One training example: inputs plus a sparse height target."""

    s2: np.ndarray                 # W x H x 10
    s1: Optional[np.ndarray]       # W x H x 2
    target_h: np.ndarray           # W x H
    mask: np.ndarray               # W x H


@dataclass
class TrainSettings:
    arch: str
    epochs: int = 250
    batch_size: int = 12
    base_lr: Optional[float] = None      # default per optimizer family
    warmup_epochs: int = 20
    lr_start: float = 1e-6
    lr_peak: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    stem_width: int = 16
    loss: HyTecLossConfig = field(default_factory=HyTecLossConfig)
    bins: object = None
    checkpoint_dir: Optional[str] = None
    keep_last: int = 3
    # learning rate for the loss's own scalars (adaptive alpha / scale);
    # kept far below the model lr so the scale cannot inflate and mute
    # the regression gradient before the network has fit the data
    adaptive_lr: float = 1e-5


@dataclass
class TrainResult:
    params: object
    config: object
    adaptive: Optional[AdaptiveLossState]
    trace: list                    # rows matching TRACE_COLUMNS
    epochs_run: int


def samples_from_tiles(tiles, mask_filter=None) -> list:
    """Adapt synthetic dataset tiles into training samples."""
    out = []
    for t in tiles:
        mask = t.mask if mask_filter is None else mask_filter(t)
        out.append(Sample(s2=t.s2, s1=t.s1, target_h=t.target,
                          mask=np.asarray(mask, dtype=float)))
    return out


def make_unet(arch: str, rng: np.random.Generator,
              stem_width: int = 16, bins=None) -> tuple:
    """Model configuration and fresh parameters for a named variant."""
    if arch == "teacher_s1":
        cfg = teacher_config("s1", stem_width)
    elif arch == "teacher_s2":
        cfg = teacher_config("s2", stem_width)
    elif arch == "2mou":
        cfg = UNetConfig(stem_width=stem_width, head_kind="single")
    elif arch in ("2mdu", "a2mdu"):
        cfg = UNetConfig(stem_width=stem_width, head_kind="dual", bins=bins)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return init_unet(rng, cfg), cfg


def _model_input(sample: Sample, arch: str, cfg) -> tuple:
    if arch == "teacher_s1":
        return Tensor(sample.s1), None
    if arch == "teacher_s2":
        return Tensor(sample.s2), None
    return Tensor(sample.s2), Tensor(sample.s1)


def unet_sample_loss(sample: Sample, params: UNetParams, cfg: UNetConfig,
                     arch: str, loss_cfg: HyTecLossConfig,
                     adaptive: Optional[AdaptiveLossState],
                     parts: Optional[dict] = None) -> Tensor:
    """Per-sample loss matching the variant's head and loss pairing."""
    x2, x1 = _model_input(sample, arch, cfg)
    out = unet_forward(x2, x1, params, cfg)
    if isinstance(out, DualHeadOutput):
        target = bin_assign_map(sample.target_h, sample.mask > 0, cfg.bins)
        kind = "adaptive" if arch == "a2mdu" else "huber"
        loss = combined_cr_loss(out.probs, out.height, target,
                                sample.target_h, loss_cfg, reg_kind=kind,
                                adaptive_state=adaptive, parts=parts)
        if parts is not None:
            parts["height"] = out.height.data
    else:
        loss = huber(out, sample.target_h, sample.mask, loss_cfg.delta)
        if parts is not None:
            parts["reg"] = float(loss.data)
            parts["height"] = out.data
    return loss


# -- checkpointing ----------------------------------------------------

_EPOCH_RE = re.compile(r"^epoch_(\d{4})$")


def _checkpoint_arrays(model, adaptive, extra: Optional[dict] = None) -> dict:
    arrays = dict(optim.export_arrays(model))
    if adaptive is not None:
        arrays["adaptive.alpha"] = adaptive.alpha.data
        arrays["adaptive.c_raw"] = adaptive.c_raw.data
    if extra:
        arrays.update(extra)
    return arrays


def save_checkpoint(directory: str, epoch: int, model, adaptive,
                    extra: Optional[dict] = None, keep_last: int = 3) -> str:
    path = os.path.join(directory, f"epoch_{epoch:04d}")
    nn.save_params(path, _checkpoint_arrays(model, adaptive, extra))
    old = sorted(d for d in os.listdir(directory) if _EPOCH_RE.match(d))
    for d in old[:-keep_last]:
        shutil.rmtree(os.path.join(directory, d))
    return path


def latest_checkpoint(directory: str) -> Optional[tuple]:
    """(epoch, path) of the newest checkpoint, or None."""
    if not os.path.isdir(directory):
        return None
    found = sorted(d for d in os.listdir(directory) if _EPOCH_RE.match(d))
    if not found:
        return None
    last = found[-1]
    return int(_EPOCH_RE.match(last).group(1)), os.path.join(directory, last)


def load_checkpoint(path: str, model, adaptive=None) -> dict:
    """Restore model (and adaptive loss) arrays; returns leftover arrays."""
    arrays = nn.load_params(path)
    known = {}
    extra = {}
    model_names = set(optim.export_arrays(model))
    for name, arr in arrays.items():
        if name in model_names:
            known[name] = arr
        elif adaptive is not None and name == "adaptive.alpha":
            adaptive.alpha.data[...] = arr
        elif adaptive is not None and name == "adaptive.c_raw":
            adaptive.c_raw.data[...] = arr
        else:
            extra[name] = arr
    optim.load_into(model, known)
    return extra


def write_trace(rows: Sequence[Sequence], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- convolutional training loop --------------------------------------

def _check_finite(value: float, step: int, parts: dict) -> None:
    if not np.isfinite(value):
        stats = {k: (float(np.nanmin(v)), float(np.nanmax(v)))
                 for k, v in parts.items() if isinstance(v, np.ndarray)}
        raise TrainingDiverged(
            f"non-finite loss {value} at step {step}; output ranges {stats}")


def train_unet(samples: Sequence[Sample], settings: TrainSettings,
               resume: bool = False) -> TrainResult:
    """SGD + cosine-decay training for the convolutional variants."""
    if settings.arch not in UNET_ARCHS:
        raise ValueError(f"not a convolutional variant: {settings.arch!r}")
    rng = np.random.default_rng(settings.seed)
    params, cfg = make_unet(settings.arch, rng, settings.stem_width,
                            settings.bins)
    adaptive = AdaptiveLossState.create() if settings.arch == "a2mdu" else None

    registry = optim.collect_tensors(params)
    base_lr = settings.base_lr if settings.base_lr is not None else 1e-2
    opt = optim.SGD(registry, base_lr)
    opt_loss = None
    if adaptive is not None:
        opt_loss = optim.SGD({"adaptive.alpha": adaptive.alpha,
                              "adaptive.c_raw": adaptive.c_raw},
                             settings.adaptive_lr)

    start_epoch = 0
    if resume and settings.checkpoint_dir:
        found = latest_checkpoint(settings.checkpoint_dir)
        if found:
            start_epoch = found[0] + 1
            load_checkpoint(found[1], params, adaptive)

    order_rng = np.random.default_rng(settings.seed + 1)
    # replay the shuffle history so a resumed run sees the same stream
    for _ in range(start_epoch):
        order_rng.permutation(len(samples))

    trace = []
    step = start_epoch * max(1, int(np.ceil(len(samples) / settings.batch_size)))
    for epoch in range(start_epoch, settings.epochs):
        opt.lr = optim.cosine_lr(epoch, settings.epochs, base_lr)
        order = order_rng.permutation(len(samples))
        for lo in range(0, len(order), settings.batch_size):
            batch = order[lo:lo + settings.batch_size]
            opt.zero_grad()
            if opt_loss is not None:
                opt_loss.zero_grad()
            total = 0.0
            ce_part = reg_part = 0.0
            for k in batch:
                parts: dict = {}
                loss = unet_sample_loss(samples[k], params, cfg,
                                        settings.arch, settings.loss,
                                        adaptive, parts)
                scaled = loss * (1.0 / len(batch))
                backward(Tape.from_root(scaled), scaled)
                total += float(scaled.data)
                ce_part += parts.get("ce", 0.0) / len(batch)
                reg_part += parts.get("reg", 0.0) / len(batch)
                _check_finite(float(loss.data), step, parts)
            opt.step()
            if opt_loss is not None:
                opt_loss.step()
            trace.append([step, opt.lr, total, 0.0, 0.0, 0.0,
                          ce_part, reg_part])
            step += 1
        if settings.checkpoint_dir:
            save_checkpoint(settings.checkpoint_dir, epoch, params, adaptive,
                            keep_last=settings.keep_last)
    return TrainResult(params, cfg, adaptive, trace, settings.epochs)


# -- distillation training loop ---------------------------------------

@dataclass
class Teacher:
    params: UNetParams
    config: UNetConfig
    modality: str                  # s1 | s2


def teacher_heights(teacher: Teacher, sample: Sample) -> np.ndarray:
    """Frozen-teacher inference as a plain array (no gradient)."""
    from .unet import teacher_forward

    x = Tensor(sample.s1 if teacher.modality == "s1" else sample.s2)
    optim.set_bn_mode(teacher.params, "eval")
    return teacher_forward(x, teacher.params, teacher.config).data


def _block_reduce(value: np.ndarray, mask: np.ndarray, factor: int) -> tuple:
    """Masked average pooling; a coarse pixel is valid when at least half
    of its covered fine pixels are."""
    w, h = value.shape
    v = (value * mask).reshape(w // factor, factor, h // factor, factor)
    m = mask.reshape(w // factor, factor, h // factor, factor)
    vsum = v.sum(axis=(1, 3))
    frac = m.sum(axis=(1, 3)) / factor ** 2
    out_mask = frac >= 0.5
    out = np.where(out_mask, vsum / np.maximum(m.sum(axis=(1, 3)), 1), 0.0)
    return out, out_mask.astype(float)


def aux_targets_from_teachers(t1_map: np.ndarray, t2_map: np.ndarray,
                              patch: int, tol: float) -> list:
    """Consensus height maps pooled to the three auxiliary resolutions."""
    value, valid = kd_teacher_consensus(t1_map, t2_map, tol)
    out = []
    for factor in (patch, patch // 2, patch // 4):
        out.append(_block_reduce(value, valid.astype(float), factor))
    return out


def hytec_sample_loss(sample: Sample, params: HyTecParams, cfg: HyTecConfig,
                      teachers: Sequence[Teacher],
                      loss_cfg: HyTecLossConfig,
                      adaptive: AdaptiveLossState,
                      parts: Optional[dict] = None) -> Tensor:
    t_maps = [teacher_heights(t, sample) for t in teachers]
    aux_t = aux_targets_from_teachers(t_maps[0], t_maps[1], cfg.patch,
                                      loss_cfg.consensus_tol)
    out = hytec_forward(Tensor(sample.s2), params, cfg)
    target = bin_assign_map(sample.target_h, sample.mask > 0, cfg.bins)
    loss = hytec_total_loss(out.aux, aux_t, out.main.probs, out.main.height,
                            target, sample.target_h, loss_cfg,
                            adaptive_state=adaptive, parts=parts)
    if parts is not None:
        parts["height"] = out.main.height.data
    return loss


def train_hytec(samples: Sequence[Sample], teachers: Sequence[Teacher],
                settings: TrainSettings, cfg: Optional[HyTecConfig] = None,
                resume: bool = False) -> TrainResult:
    """AdamW + warmup/cosine distillation training for the hybrid model."""
    if len(teachers) != 2:
        raise ValueError("distillation needs exactly two teachers")
    rng = np.random.default_rng(settings.seed)
    if cfg is None:
        cfg = HyTecConfig()
    params = init_hytec(rng, cfg)
    adaptive = AdaptiveLossState.create()

    registry = optim.collect_tensors(params)
    registry["adaptive.alpha"] = adaptive.alpha
    registry["adaptive.c_raw"] = adaptive.c_raw
    opt = optim.AdamW(registry, lr=settings.lr_peak,
                      weight_decay=settings.weight_decay)

    start_epoch = 0
    if resume and settings.checkpoint_dir:
        found = latest_checkpoint(settings.checkpoint_dir)
        if found:
            start_epoch = found[0] + 1
            extra = load_checkpoint(found[1], params, adaptive)
            for name, arr in extra.items():
                if name == "adam_t":
                    opt.t = int(arr)
                    continue
                kind, key = name.split(".", 1)
                if kind == "adam_m":
                    opt.m[key] = arr.copy()
                elif kind == "adam_v":
                    opt.v[key] = arr.copy()

    order_rng = np.random.default_rng(settings.seed + 1)
    for _ in range(start_epoch):
        order_rng.permutation(len(samples))

    trace = []
    step = start_epoch * max(1, int(np.ceil(len(samples) / settings.batch_size)))
    for epoch in range(start_epoch, settings.epochs):
        opt.lr = optim.warmup_cosine_lr(epoch, settings.warmup_epochs,
                                        settings.lr_start, settings.lr_peak,
                                        settings.epochs)
        order = order_rng.permutation(len(samples))
        for lo in range(0, len(order), settings.batch_size):
            batch = order[lo:lo + settings.batch_size]
            opt.zero_grad()
            total = 0.0
            agg = {"aux1": 0.0, "aux2": 0.0, "aux3": 0.0,
                   "ce": 0.0, "reg": 0.0}
            for k in batch:
                parts: dict = {}
                loss = hytec_sample_loss(samples[k], params, cfg, teachers,
                                         settings.loss, adaptive, parts)
                scaled = loss * (1.0 / len(batch))
                backward(Tape.from_root(scaled), scaled)
                total += float(scaled.data)
                for key in agg:
                    agg[key] += parts.get(key, 0.0) / len(batch)
                _check_finite(float(loss.data), step, parts)
            opt.step()
            trace.append([step, opt.lr, total, agg["aux1"], agg["aux2"],
                          agg["aux3"], agg["ce"], agg["reg"]])
            step += 1
        if settings.checkpoint_dir:
            extra = {f"adam_m.{k}": v for k, v in opt.m.items()}
            extra.update({f"adam_v.{k}": v for k, v in opt.v.items()})
            extra["adam_t"] = np.asarray(opt.t)
            save_checkpoint(settings.checkpoint_dir, epoch, params, adaptive,
                            extra=extra, keep_last=settings.keep_last)
    return TrainResult(params, cfg, adaptive, trace, settings.epochs)


def predict_heights(params, cfg, sample: Sample) -> np.ndarray:
    """Inference: the model's height map for one sample, eval-mode."""
    optim.set_bn_mode(params, "eval")
    if isinstance(cfg, HyTecConfig):
        return hytec_forward(Tensor(sample.s2), params, cfg).main.height.data
    if cfg.dual_modality:
        out = unet_forward(Tensor(sample.s2), Tensor(sample.s1), params, cfg)
    elif cfg.in_channels_s2 == 2:
        out = unet_forward(Tensor(sample.s1), None, params, cfg)
    else:
        out = unet_forward(Tensor(sample.s2), None, params, cfg)
    return out.height.data if isinstance(out, DualHeadOutput) else out.data
