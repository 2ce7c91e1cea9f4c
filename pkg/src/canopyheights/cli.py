"""Command-line entry point tying the pipeline together.

Subcommands: ``synth`` (generate a desk-scale dataset), ``filter``
(LiDAR shot quality filter), ``composite`` (median compositing),
``grid`` (sampling-grid construction), ``train`` (all model variants),
``eval`` (inference + reports), and ``gsi`` (sharpness analysis of
predicted maps).  Everything is seeded; single-threaded runs are
byte-reproducible.  ``CANOPY_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import os
import sys
from multiprocessing.pool import ThreadPool

import numpy as np

from . import config as cfgmod
from . import datapipe as dp
from . import metrics as mt
from . import train as tr
from .hytec import HyTecConfig
from .losses import HeightBinning, HyTecLossConfig
from .tensor import load_tensor, save_tensor

log = logging.getLogger("canopyheights")

STACK_FRAMES = 4


def _bins_from_config(cfg) -> HeightBinning:
    return HeightBinning(np.array(cfg.floats("loss", "bin_edges")),
                         overlap=cfg.get("loss", "overlap"))


def _loss_from_config(cfg) -> HyTecLossConfig:
    return HyTecLossConfig(betas=tuple(cfg.floats("loss", "betas")),
                           alpha_cr=cfg.get("loss", "alpha_cr"),
                           delta=cfg.get("loss", "delta"),
                           consensus_tol=cfg.get("loss", "consensus_tol"))


# -- dataset directory layout -----------------------------------------

TILE_PARTS = ("s2", "s1", "heights", "target", "mask")


def write_dataset(tiles, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    shots, rows = [], []
    for i, t in enumerate(tiles):
        for part in TILE_PARTS:
            arr = getattr(t, part)
            save_tensor(os.path.join(out_dir, f"tile_{i:03d}.{part}.tnsr"),
                        np.asarray(arr, dtype=float))
        shots.extend(t.shots)
        rows.append([i, *t.bounds, len(t.shots)])
    dp.shots_to_csv(shots, os.path.join(out_dir, "shots.csv"))
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile", "shot", "label"])
        for i, t in enumerate(tiles):
            for j, lab in enumerate(t.shot_labels):
                w.writerow([i, j, lab])
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile", "xmin", "ymin", "xmax", "ymax", "n_shots"])
        w.writerows(rows)


def read_dataset(dataset_dir: str) -> list:
    paths = sorted(glob.glob(os.path.join(dataset_dir, "tile_*.s2.tnsr")))
    if not paths:
        raise FileNotFoundError(f"no tiles under {dataset_dir}")
    tiles = []
    for p in paths:
        stem = p[:-len(".s2.tnsr")]
        parts = {part: load_tensor(f"{stem}.{part}.tnsr")
                 for part in TILE_PARTS}
        tiles.append(dp.SynthTile(parts["s2"], parts["s1"], parts["heights"],
                                  parts["target"], parts["mask"] > 0,
                                  shots=[], shot_labels=[], bounds=()))
    return tiles


def _samples(tiles, size: int, seed: int) -> list:
    """One deterministic crop (with flips) per tile at the model size."""
    rng = np.random.default_rng(seed)
    out = []
    for t in tiles:
        (s2, s1, th, m), _ = dp.sample_patch(
            [t.s2, t.s1, t.target, np.asarray(t.mask, dtype=float)],
            size, rng)
        out.append(tr.Sample(s2=s2, s1=s1, target_h=th, mask=m))
    return out


# -- subcommands ------------------------------------------------------

def cmd_synth(cfg, out_dir: str, workers: int) -> None:
    seed = cfg.get("run", "seed")
    tiles = dp.synth_dataset(cfg.get("data", "n_tiles"),
                             cfg.get("data", "tile_size"), seed,
                             shots_per_tile=cfg.get("data", "shots_per_tile"),
                             violation_rate=cfg.get("data", "violation_rate"))
    write_dataset(tiles, out_dir)
    # a small noisy time-series stack over tile 0 for compositing runs
    rng = np.random.default_rng(seed + 1)
    stack_dir = os.path.join(out_dir, "stack")
    os.makedirs(stack_dir, exist_ok=True)
    base = tiles[0].s2
    for k in range(STACK_FRAMES):
        frame = base + rng.normal(scale=0.02, size=base.shape)
        mask = rng.random(base.shape[:2]) > 0.1
        save_tensor(os.path.join(stack_dir, f"frame_{k}.tnsr"), frame)
        save_tensor(os.path.join(stack_dir, f"mask_{k}.tnsr"),
                    mask.astype(float))
    log.info("wrote %d tiles to %s", len(tiles), out_dir)


def cmd_filter(cfg, out_dir: str, workers: int) -> None:
    shots = dp.shots_from_csv(
        os.path.join(cfg.get("data", "dataset_dir"), "shots.csv"))
    retained, counts = dp.filter_gedi(shots)
    os.makedirs(out_dir, exist_ok=True)
    dp.shots_to_csv(retained, os.path.join(out_dir, "retained.csv"))
    with open(os.path.join(out_dir, "filter_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rule", "rejected"])
        for rule in dp.FILTER_RULES:
            w.writerow([rule, counts[rule]])
        w.writerow(["retained", len(retained)])
    log.info("retained %d of %d shots", len(retained), len(shots))


def cmd_composite(cfg, out_dir: str, workers: int) -> None:
    stack_dir = os.path.join(cfg.get("data", "dataset_dir"), "stack")
    frames = sorted(glob.glob(os.path.join(stack_dir, "frame_*.tnsr")))
    if not frames:
        raise FileNotFoundError(f"no frames under {stack_dir}")
    stack = dp.ImageStack(
        frames=[load_tensor(f) for f in frames],
        masks=[load_tensor(f.replace("frame_", "mask_")) > 0.5
               for f in frames])
    comp, missing = dp.median_composite(stack)
    os.makedirs(out_dir, exist_ok=True)
    save_tensor(os.path.join(out_dir, "composite.tnsr"), comp)
    with open(os.path.join(out_dir, "composite_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frames", "missing_pixels"])
        w.writerow([len(frames), missing])
    log.info("composited %d frames, %d missing pixels", len(frames), missing)


def cmd_grid(cfg, out_dir: str, workers: int) -> None:
    shots = dp.shots_from_csv(
        os.path.join(cfg.get("data", "dataset_dir"), "shots.csv"))
    cell = cfg.get("data", "cell_size_m")
    xs = [s.lon for s in shots]
    ys = [s.lat for s in shots]
    bounds = (min(xs), min(ys),
              min(xs) + np.ceil((max(xs) - min(xs)) / cell + 1e-9) * cell,
              min(ys) + np.ceil((max(ys) - min(ys)) / cell + 1e-9) * cell)
    cells = dp.build_grid(shots, bounds, cell_size=cell,
                          min_shots=cfg.get("data", "min_cell_shots"),
                          seed=cfg.get("run", "seed"))
    os.makedirs(out_dir, exist_ok=True)
    dp.grid_to_csv(cells, os.path.join(out_dir, "grid.csv"))
    log.info("kept %d grid cells", len(cells))


def _load_teacher(path: str, modality: str, stem_width: int) -> tr.Teacher:
    if not path:
        raise FileNotFoundError(f"missing teacher checkpoint for {modality}")
    if not os.path.exists(os.path.join(path, "manifest.txt")):
        found = tr.latest_checkpoint(path)
        if found is None:
            raise FileNotFoundError(f"no checkpoint under {path}")
        path = found[1]
    params, cfg = tr.make_unet(f"teacher_{modality}",
                               np.random.default_rng(0), stem_width)
    tr.load_checkpoint(path, params)
    return tr.Teacher(params, cfg, modality)


def _settings_from_config(cfg, out_dir: str) -> tr.TrainSettings:
    return tr.TrainSettings(
        arch=cfg.get("run", "arch"),
        epochs=cfg.get("optimizer", "max_epochs"),
        batch_size=cfg.get("optimizer", "batch_size"),
        base_lr=cfg.get("optimizer", "lr"),
        adaptive_lr=cfg.get("optimizer", "lr_adaptive"),
        warmup_epochs=cfg.get("optimizer", "warmup_epochs"),
        lr_start=cfg.get("optimizer", "lr_start"),
        lr_peak=cfg.get("optimizer", "lr_peak"),
        seed=cfg.get("run", "seed"),
        stem_width=cfg.get("model", "stem_width"),
        loss=_loss_from_config(cfg),
        bins=_bins_from_config(cfg),
        checkpoint_dir=os.path.join(out_dir, "checkpoints"))


def _hytec_config(cfg) -> HyTecConfig:
    return HyTecConfig(image_size=cfg.get("model", "input_size"),
                       patch=cfg.get("model", "patch"),
                       embed_dim=cfg.get("model", "embed_dim"),
                       blocks=cfg.get("model", "blocks"),
                       heads=cfg.get("model", "heads"),
                       l_hat=cfg.get("model", "l_hat"),
                       taps=tuple(cfg.ints("model", "taps")),
                       bins=_bins_from_config(cfg))


def cmd_train(cfg, out_dir: str, workers: int, resume: bool = False) -> None:
    tiles = read_dataset(cfg.get("data", "dataset_dir"))
    samples = _samples(tiles, cfg.get("model", "input_size"),
                       cfg.get("run", "seed") + 17)
    os.makedirs(out_dir, exist_ok=True)
    settings = _settings_from_config(cfg, out_dir)
    arch = settings.arch
    if arch == "hytec":
        stem = cfg.get("model", "stem_width")
        teachers = [
            _load_teacher(cfg.get("data", "teacher_s1"), "s1", stem),
            _load_teacher(cfg.get("data", "teacher_s2"), "s2", stem)]
        result = tr.train_hytec(samples, teachers, settings,
                                cfg=_hytec_config(cfg), resume=resume)
    else:
        result = tr.train_unet(samples, settings, resume=resume)
    tr.write_trace(result.trace, os.path.join(out_dir, "trace.csv"))
    log.info("trained %s for %d epochs; final loss %.6g", arch,
             result.epochs_run,
             result.trace[-1][2] if result.trace else float("nan"))


def _restore_model(cfg):
    arch = cfg.get("run", "arch")
    ckpt = cfg.get("eval", "checkpoint")
    if not ckpt:
        raise FileNotFoundError("eval.checkpoint is not set")
    if not os.path.exists(os.path.join(ckpt, "manifest.txt")):
        found = tr.latest_checkpoint(ckpt)
        if found is None:
            raise FileNotFoundError(f"no checkpoint under {ckpt}")
        ckpt = found[1]
    rng = np.random.default_rng(0)
    if arch == "hytec":
        from .hytec import init_hytec
        mcfg = _hytec_config(cfg)
        params = init_hytec(rng, mcfg)
    else:
        params, mcfg = tr.make_unet(arch, rng, cfg.get("model", "stem_width"),
                                    _bins_from_config(cfg))
    tr.load_checkpoint(ckpt, params)
    return params, mcfg


def cmd_eval(cfg, out_dir: str, workers: int) -> None:
    tiles = read_dataset(cfg.get("data", "dataset_dir"))
    samples = _samples(tiles, cfg.get("model", "input_size"),
                       cfg.get("run", "seed") + 17)
    params, mcfg = _restore_model(cfg)
    os.makedirs(out_dir, exist_ok=True)

    def run_one(sample):
        return tr.predict_heights(params, mcfg, sample)

    if workers > 1:
        with ThreadPool(workers) as pool:
            preds = pool.map(run_one, samples)
    else:
        preds = [run_one(s) for s in samples]

    ys, yhats = [], []
    gsi_rows = []
    for i, (sample, pred) in enumerate(zip(samples, preds)):
        save_tensor(os.path.join(out_dir, f"pred_{i:03d}.tnsr"), pred)
        sel = sample.mask > 0
        ys.append(sample.target_h[sel])
        yhats.append(pred[sel])
        rep = mt.gsi(pred, sample.s2)
        gsi_rows.append([i, repr(rep.si_output), repr(rep.si_reference),
                         repr(rep.gsi), repr(rep.effective_resolution_m)])
    y = np.concatenate(ys)
    yhat = np.concatenate(yhats)

    overall = mt.summary_stats(y, yhat)
    with open(os.path.join(out_dir, "overall.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "r", "rmse", "rmspe", "bias", "sdsd", "lcs"])
        w.writerow([overall.n,
                    "" if overall.r is None else repr(overall.r),
                    repr(overall.rmse),
                    "" if overall.rmspe is None else repr(overall.rmspe),
                    repr(overall.bias), repr(overall.sdsd), repr(overall.lcs)])
    step = cfg.get("eval", "range_step")
    edges = np.arange(0.0, cfg.get("eval", "range_max") + step, step)
    mt.report_to_csv(mt.binned_report(y, yhat, edges),
                     os.path.join(out_dir, "binned.csv"))
    with open(os.path.join(out_dir, "gsi.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch", "si_output", "si_reference", "gsi",
                    "effective_resolution_m"])
        w.writerows(gsi_rows)
    log.info("evaluated %d tiles: rmse %.3f m", len(samples), overall.rmse)


def cmd_gsi(cfg, out_dir: str, workers: int) -> None:
    pred_dir = cfg.get("eval", "pred_dir")
    preds = sorted(glob.glob(os.path.join(pred_dir, "pred_*.tnsr")))
    if not preds:
        raise FileNotFoundError(f"no predictions under {pred_dir}")
    tiles = read_dataset(cfg.get("data", "dataset_dir"))
    samples = _samples(tiles, cfg.get("model", "input_size"),
                       cfg.get("run", "seed") + 17)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, p in enumerate(preds):
        rep = mt.gsi(load_tensor(p), samples[i].s2)
        rows.append([i, repr(rep.si_output), repr(rep.si_reference),
                     repr(rep.gsi), repr(rep.effective_resolution_m)])
    mean_gsi = float(np.mean([float(r[3]) for r in rows]))
    with open(os.path.join(out_dir, "gsi.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch", "si_output", "si_reference", "gsi",
                    "effective_resolution_m"])
        w.writerows(rows)
        w.writerow(["mean", "", "", repr(mean_gsi),
                    repr(mt.resolution_from_gsi(mean_gsi))])
    log.info("mean gsi %.3f over %d patches", mean_gsi, len(rows))


COMMANDS = {
    "synth": cmd_synth,
    "filter": cmd_filter,
    "composite": cmd_composite,
    "grid": cmd_grid,
    "train": cmd_train,
    "eval": cmd_eval,
    "gsi": cmd_gsi,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canopyheights",
        description="Canopy-height estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers for data-side stages")
        p.add_argument("--out", default=".", help="output directory")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from the latest checkpoint")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CANOPY_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.workers is not None:
            cfg.set("run", "workers", args.workers)
        cfg.validate()
        kwargs = {}
        if args.command == "train":
            kwargs["resume"] = args.resume
        COMMANDS[args.command](cfg, args.out, cfg.get("run", "workers"),
                               **kwargs)
    except Exception as exc:       # noqa: BLE001 - CLI boundary
        log.error("%s", exc)
        if os.environ.get("CANOPY_LOG", "").upper() == "DEBUG":
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
