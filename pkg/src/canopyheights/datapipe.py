"""Data preparation: radar normalization, rainfall gating, median
compositing, LiDAR shot filtering, target rasterization, grid sampling with
rebalancing, patch augmentation, and a synthetic desk-scale dataset
generator.

All tiles are plain rasters at a 10 m pixel; coordinates are local meters
(no CRS handling).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

RAIN_LIMIT_MM = 40.0
MIN_CELL_SHOTS = 600
CELL_SIZE_M = 7680.0
PIXEL_SIZE_M = 10.0

# per-set ratio thresholds and training duplication counts, sets 1..9
SET_THRESHOLDS = (0.50, 0.25, 0.10, 0.10, 0.05, 0.025, 0.025, 0.025, 0.025)
SET_DUPLICATIONS = (0, 1, 0, 3, 4, 4, 8, 8, 4)


# -- backscatter ------------------------------------------------------

@dataclass
class BackscatterSample:
    """Linear-scale radar backscatter acquired at some incidence angle."""

    sigma0: float
    theta: float
    theta_ref: float = 40.0

    def __post_init__(self):
        if not 0.0 < self.theta < 90.0:
            raise ValueError("incidence angle must lie in (0, 90) degrees")
        if not 0.0 < self.theta_ref < 90.0:
            raise ValueError("reference angle must lie in (0, 90) degrees")
        if self.sigma0 < 0:
            raise ValueError("linear backscatter must be non-negative")


def normalize_backscatter(s: BackscatterSample) -> float:
    """Square-cosine normalization to the reference incidence angle."""
    t = np.radians(s.theta)
    tr = np.radians(s.theta_ref)
    return float(s.sigma0 * np.cos(tr) ** 2 / np.cos(t) ** 2)


# -- rainfall gating --------------------------------------------------

def rainfall_gate(acquisitions: Sequence[int],
                  rainfall: Mapping[int, float]) -> list:
    """Drop acquisitions following heavy rain.

    An acquisition on day a is dropped when either 4-day rainfall window
    inside the preceding 5 days — days [a-3, a] or [a-4, a-1] — totals
    more than 40 mm.  The rainfall series must cover [a-4, a] for every
    acquisition.
    """
    retained = []
    for a in acquisitions:
        days = [a - k for k in range(5)]
        missing = [d for d in days if d not in rainfall]
        if missing:
            raise ValueError(f"rainfall series missing days {missing}")
        recent = sum(rainfall[a - k] for k in range(4))        # [a-3, a]
        prior = sum(rainfall[a - k] for k in range(1, 5))      # [a-4, a-1]
        if recent <= RAIN_LIMIT_MM and prior <= RAIN_LIMIT_MM:
            retained.append(a)
    return retained


# -- compositing ------------------------------------------------------

@dataclass
class ImageStack:
    """Co-registered time-series frames with per-pixel validity masks."""

    frames: list          # each W x H x C float array
    masks: list           # each W x H bool array
    timestamps: list = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("empty stack")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise ValueError("all frames must share one shape")
        if len(self.masks) != len(self.frames):
            raise ValueError("one mask per frame required")
        if any(m.shape != shape[:2] for m in self.masks):
            raise ValueError("masks must match the frame extent")


def median_composite(stack: ImageStack) -> tuple:
    """Per-pixel per-band median over valid samples.

    Even valid counts average the two middle values.  Pixels with zero
    valid samples come back as NaN; the second return value counts them.
    """
    data = np.stack([np.asarray(f, dtype=float) for f in stack.frames])
    valid = np.stack([np.asarray(m, dtype=bool) for m in stack.masks])
    data = np.where(valid[:, :, :, None], data, np.nan)
    import warnings
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="All-NaN slice")
        out = np.nanmedian(data, axis=0)
    missing = int(np.isnan(out).any(axis=-1).sum())
    return out, missing


# -- LiDAR shot filtering ---------------------------------------------

@dataclass
class GediShot:
    """One spaceborne LiDAR shot with its quality variables."""

    lon: float
    lat: float
    rh98: float
    num_detectedmodes: int
    snr_db: float
    view_angle: float
    sensitivity: float
    elm: float
    srtm: float
    rx_sample_count: int
    search_end: int
    canopy_cover: float
    ndvi30: float
    acquired_at: int
    beam_kind: str = "full_power"

    def __post_init__(self):
        if not 0.0 <= self.sensitivity <= 1.0:
            raise ValueError("sensitivity must lie in [0, 1]")
        if self.rh98 < 0:
            raise ValueError("rh98 must be non-negative")


FILTER_RULES = ("modes", "snr_va", "sensitivity", "elevation",
                "waveform", "ndvi")


def _rule_violations(shot: GediShot, sigma_cover: float) -> list:
    v = []
    if shot.num_detectedmodes == 0:
        v.append("modes")
    if shot.snr_db < 12.0 or shot.view_angle > 5.0:
        v.append("snr_va")
    if shot.sensitivity < 0.95:
        v.append("sensitivity")
    if abs(shot.elm - shot.srtm) > 75.0:
        v.append("elevation")
    if shot.rx_sample_count - shot.search_end <= 1:
        v.append("waveform")
    if abs(shot.canopy_cover - shot.ndvi30) > 1.5 * sigma_cover:
        v.append("ndvi")
    return v


def filter_gedi(shots: Sequence[GediShot],
                sigma_cover: Optional[float] = None,
                rules: Sequence[str] = FILTER_RULES) -> tuple:
    """Apply the shot quality filter.

    Returns (retained shots, per-rule rejection counts).  Each rejected
    shot is attributed to the first violated rule in the canonical order,
    so the counts plus the retained count sum to the input count.  When
    sigma_cover is omitted it is the population std of |cover - ndvi|
    over the input shots.  ``rules`` restricts which rules are active.
    """
    unknown = set(rules) - set(FILTER_RULES)
    if unknown:
        raise ValueError(f"unknown filter rules {sorted(unknown)}")
    if sigma_cover is None:
        diffs = np.array([abs(s.canopy_cover - s.ndvi30) for s in shots])
        sigma_cover = float(diffs.std()) if len(diffs) else 0.0
    counts = {r: 0 for r in FILTER_RULES}
    retained = []
    for shot in shots:
        hit = [r for r in _rule_violations(shot, sigma_cover) if r in rules]
        if hit:
            counts[hit[0]] += 1
        else:
            retained.append(shot)
    return retained, counts


# -- rasterization ----------------------------------------------------

def rasterize_targets(shots: Sequence[GediShot], bounds: tuple,
                      pixel: float = PIXEL_SIZE_M) -> tuple:
    """Burn shot heights into a raster; later-timestamped shots win ties.

    ``bounds`` is (xmin, ymin, xmax, ymax) in local meters; shot lon/lat
    are local meter coordinates.  Returns (target, mask).
    """
    xmin, ymin, xmax, ymax = bounds
    w = int(round((xmax - xmin) / pixel))
    h = int(round((ymax - ymin) / pixel))
    target = np.zeros((w, h))
    mask = np.zeros((w, h), dtype=bool)
    stamp = np.full((w, h), -np.inf)
    for s in shots:
        if not (xmin <= s.lon < xmax and ymin <= s.lat < ymax):
            raise ValueError("shot outside the tile bounds")
        i = int((s.lon - xmin) // pixel)
        j = int((s.lat - ymin) // pixel)
        if s.acquired_at >= stamp[i, j]:
            target[i, j] = s.rh98
            mask[i, j] = True
            stamp[i, j] = s.acquired_at
    return target, mask


# -- grid construction ------------------------------------------------

@dataclass
class GridCell:
    """One sampling-grid cell with its rebalancing assignment."""

    cell_id: tuple            # (col, row)
    bounds: tuple             # (xmin, ymin, xmax, ymax) meters
    shot_indices: list
    ratios: np.ndarray        # per-set height-range occupancy, sets 1..9
    set_id: int
    split: str                # train | val
    duplication: int


def height_range_ratios(heights: np.ndarray) -> np.ndarray:
    """Fraction of shots inside each set's height range (sets 1..9).

    Ranges step by 5 m: <=5, (5,10], ..., (35,40], and >=40 for the top
    set (a 40 m shot counts toward the top set only where the overlap
    matters — each entry uses its own range predicate).
    """
    heights = np.asarray(heights, dtype=float)
    n = len(heights)
    if n == 0:
        raise ValueError("no heights")
    out = np.empty(9)
    out[0] = (heights <= 5.0).sum() / n
    for s in range(2, 9):
        lo, hi = 5.0 * (s - 1), 5.0 * s
        out[s - 1] = ((heights > lo) & (heights <= hi)).sum() / n
    out[8] = (heights >= 40.0).sum() / n
    return out


def assign_set(ratios: np.ndarray) -> int:
    """First matching set scanned from the tallest range downward.

    Cells matching no row fall back to set 1.
    """
    for s in range(9, 0, -1):
        if ratios[s - 1] > SET_THRESHOLDS[s - 1]:
            return s
    return 1


def build_grid(shots: Sequence[GediShot], area_bounds: tuple,
               cell_size: float = CELL_SIZE_M,
               min_shots: int = MIN_CELL_SHOTS, seed: int = 0) -> list:
    """Tile the area, keep well-sampled cells, and rebalance by height.

    Cells with fewer than ``min_shots`` shots are dropped.  Each kept cell
    gets a set id from its height-range ratios, a seeded 75/25 train/val
    split within each set, and the set's duplication count (training
    cells only; a duplicated cell appears 1 + n times in a training list).
    """
    xmin, ymin, xmax, ymax = area_bounds
    ncols = int(np.ceil((xmax - xmin) / cell_size))
    nrows = int(np.ceil((ymax - ymin) / cell_size))
    buckets: dict = {}
    for idx, s in enumerate(shots):
        c = int((s.lon - xmin) // cell_size)
        r = int((s.lat - ymin) // cell_size)
        if 0 <= c < ncols and 0 <= r < nrows:
            buckets.setdefault((c, r), []).append(idx)

    cells = []
    for cid in sorted(buckets):
        idxs = buckets[cid]
        if len(idxs) < min_shots:
            continue
        ratios = height_range_ratios(np.array([shots[i].rh98 for i in idxs]))
        set_id = assign_set(ratios)
        c, r = cid
        bounds = (xmin + c * cell_size, ymin + r * cell_size,
                  xmin + (c + 1) * cell_size, ymin + (r + 1) * cell_size)
        cells.append(GridCell(cid, bounds, idxs, ratios, set_id, "train", 0))

    rng = np.random.default_rng(seed)
    for s in range(1, 10):
        members = [c for c in cells if c.set_id == s]
        if not members:
            continue
        order = rng.permutation(len(members))
        n_train = max(1, int(round(0.75 * len(members))))
        for pos, k in enumerate(order):
            cell = members[k]
            if pos < n_train:
                cell.split = "train"
                cell.duplication = SET_DUPLICATIONS[s - 1]
            else:
                cell.split = "val"
                cell.duplication = 0
    return cells


def training_list(cells: Sequence[GridCell]) -> list:
    """Training cells with duplication applied (original + n copies)."""
    out = []
    for c in cells:
        if c.split == "train":
            out.extend([c] * (1 + c.duplication))
    return out


# -- patch sampling ---------------------------------------------------

def sample_patch(arrays: Sequence[np.ndarray], patch: int,
                 rng: np.random.Generator) -> tuple:
    """Uniform random crop plus independent 50% horizontal/vertical flips.

    Every array shares the leading W x H extents and is cropped and
    flipped identically.  Returns (cropped arrays, (i0, j0, flip_h,
    flip_v)).
    """
    w, h = arrays[0].shape[:2]
    if any(a.shape[:2] != (w, h) for a in arrays):
        raise ValueError("arrays disagree on spatial extents")
    if patch > w or patch > h:
        raise ValueError("patch larger than the tile")
    i0 = int(rng.integers(0, w - patch + 1))
    j0 = int(rng.integers(0, h - patch + 1))
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    out = []
    for a in arrays:
        p = a[i0:i0 + patch, j0:j0 + patch]
        if flip_h:
            p = p[::-1]
        if flip_v:
            p = p[:, ::-1]
        out.append(np.ascontiguousarray(p))
    return out, (i0, j0, flip_h, flip_v)


# -- synthetic dataset ------------------------------------------------

S2_BANDS = 10
S1_BANDS = 2
MAX_HEIGHT_M = 55.0

# band response to normalized height: offset, linear, quadratic
_S2_COEF = np.stack([
    np.linspace(0.08, 0.35, S2_BANDS),
    np.linspace(0.55, -0.35, S2_BANDS),
    np.linspace(-0.25, 0.45, S2_BANDS),
], axis=1)
_S1_COEF = np.array([[0.30, 0.50, -0.20],
                     [0.10, 0.65, 0.10]])


@dataclass
class SynthTile:
    """One synthetic tile: inputs, dense truth, sparse targets, shots."""

    s2: np.ndarray            # W x H x 10
    s1: np.ndarray            # W x H x 2
    heights: np.ndarray       # W x H dense truth
    target: np.ndarray        # W x H sparse raster
    mask: np.ndarray          # W x H bool
    shots: list
    shot_labels: list         # "clean" or the violated rule name
    bounds: tuple


def _height_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Blobby forest patches over a low-vegetation background.

    Roughly 95% of the area stays below 15 m with a tall-tree tail up to
    the generator clamp.
    """
    base = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 16)
    base = 8.0 * (base - base.min()) / (np.ptp(base) + 1e-12)

    forest = np.zeros((size, size))
    ii, jj = np.mgrid[0:size, 0:size]
    n_blobs = max(1, 3 * size // 32)
    for _ in range(n_blobs):
        ci, cj = rng.uniform(0, size, 2)
        radius = rng.uniform(size / 32, size / 10)
        peak = rng.uniform(18.0, 50.0)
        d2 = (ii - ci) ** 2 + (jj - cj) ** 2
        forest = np.maximum(forest, peak * np.exp(-d2 / (2 * radius ** 2)))
    # suppress blob skirts so mid-height cover stays sparse
    forest = np.where(forest > 12.0, forest, 0.0)
    return np.clip(np.maximum(base, forest), 0.0, MAX_HEIGHT_M)


def bands_from_height(heights: np.ndarray,
                      rng: Optional[np.random.Generator] = None,
                      noise: float = 0.01) -> tuple:
    """Deterministic band responses to height, plus optional seeded noise.

    The response compresses toward tall canopies (optical signal
    saturation), so height differences above ~30 m produce only small
    band differences relative to the noise floor.
    """
    u = np.tanh(2.2 * np.asarray(heights, dtype=float) / MAX_HEIGHT_M)
    feats = np.stack([np.ones_like(u), u, u * u], axis=-1)
    s2 = feats @ _S2_COEF.T
    s1 = feats @ _S1_COEF.T
    if rng is not None and noise > 0:
        s2 = s2 + rng.normal(scale=noise, size=s2.shape)
        s1 = s1 + rng.normal(scale=noise, size=s1.shape)
    return s2, s1


def _make_shot(rng, x, y, rh98, t, violation=None) -> GediShot:
    """A clean shot, then at most one planted rule violation."""
    elm = rng.uniform(100.0, 400.0)
    cover = float(np.clip(rh98 / MAX_HEIGHT_M + rng.normal(0, 0.02), 0, 1))
    kw = dict(
        lon=x, lat=y, rh98=max(rh98, 0.0),
        num_detectedmodes=int(rng.integers(1, 5)),
        snr_db=rng.uniform(13.0, 30.0),
        view_angle=rng.uniform(0.0, 4.5),
        sensitivity=rng.uniform(0.955, 1.0),
        elm=elm, srtm=elm + rng.uniform(-20.0, 20.0),
        rx_sample_count=int(rng.integers(500, 1000)),
        search_end=int(rng.integers(200, 400)),
        canopy_cover=cover, ndvi30=float(np.clip(cover + rng.normal(0, 0.01), 0, 1)),
        acquired_at=t,
        beam_kind="full_power" if rng.random() < 0.5 else "coverage")
    if violation == "modes":
        kw["num_detectedmodes"] = 0
    elif violation == "snr_va":
        if rng.random() < 0.5:
            kw["snr_db"] = rng.uniform(2.0, 11.5)
        else:
            kw["view_angle"] = rng.uniform(5.5, 8.0)
    elif violation == "sensitivity":
        kw["sensitivity"] = rng.uniform(0.5, 0.94)
    elif violation == "elevation":
        kw["srtm"] = elm + rng.choice([-1.0, 1.0]) * rng.uniform(80.0, 200.0)
    elif violation == "waveform":
        kw["search_end"] = kw["rx_sample_count"] - int(rng.integers(0, 2))
    elif violation == "ndvi":
        kw["ndvi30"] = float(np.clip(kw["canopy_cover"] + 5.0, 0, None))
    elif violation is not None:
        raise ValueError(f"unknown violation {violation!r}")
    return GediShot(**kw)


def synth_dataset(n_tiles: int, size: int, seed: int,
                  shots_per_tile: int = 80,
                  violation_rate: float = 0.2) -> list:
    """Procedural tiles with learnable inputs and labeled LiDAR shots.

    Shot labels mark either "clean" or the single planted filter-rule
    violation, providing the ground truth for filter tests.  The "ndvi"
    plant is extreme enough to clear the population threshold regardless
    of the draw.
    """
    rng = np.random.default_rng(seed)
    tiles = []
    for ti in range(n_tiles):
        heights = _height_field(rng, size)
        s2, s1 = bands_from_height(heights, rng)
        x0, y0 = ti * size * PIXEL_SIZE_M, 0.0
        bounds = (x0, y0, x0 + size * PIXEL_SIZE_M, y0 + size * PIXEL_SIZE_M)
        shots, labels = [], []
        for _ in range(shots_per_tile):
            i = int(rng.integers(0, size))
            j = int(rng.integers(0, size))
            x = bounds[0] + (i + 0.5) * PIXEL_SIZE_M
            y = bounds[1] + (j + 0.5) * PIXEL_SIZE_M
            rh = float(heights[i, j] + rng.normal(0, 0.3))
            rh = float(np.clip(rh, 0.0, MAX_HEIGHT_M))
            violation = None
            if rng.random() < violation_rate:
                violation = FILTER_RULES[int(rng.integers(len(FILTER_RULES)))]
            shots.append(_make_shot(rng, x, y, rh,
                                    t=int(rng.integers(0, 10000)), violation=violation))
            labels.append(violation or "clean")
        target, mask = rasterize_targets(shots, bounds)
        tiles.append(SynthTile(s2, s1, heights, target, mask,
                               shots, labels, bounds))
    return tiles


# -- CSV interfaces ---------------------------------------------------

SHOT_FIELDS = [f.name for f in dataclasses.fields(GediShot)]


def shots_to_csv(shots: Sequence[GediShot], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SHOT_FIELDS)
        for s in shots:
            w.writerow([getattr(s, f) for f in SHOT_FIELDS])


def shots_from_csv(path: str) -> list:
    out = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != SHOT_FIELDS:
            raise ValueError("unexpected shot CSV header")
        for row in r:
            out.append(GediShot(
                lon=float(row["lon"]), lat=float(row["lat"]),
                rh98=float(row["rh98"]),
                num_detectedmodes=int(row["num_detectedmodes"]),
                snr_db=float(row["snr_db"]),
                view_angle=float(row["view_angle"]),
                sensitivity=float(row["sensitivity"]),
                elm=float(row["elm"]), srtm=float(row["srtm"]),
                rx_sample_count=int(row["rx_sample_count"]),
                search_end=int(row["search_end"]),
                canopy_cover=float(row["canopy_cover"]),
                ndvi30=float(row["ndvi30"]),
                acquired_at=int(row["acquired_at"]),
                beam_kind=row["beam_kind"]))
    return out


def grid_to_csv(cells: Sequence[GridCell], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["col", "row", "xmin", "ymin", "xmax", "ymax",
                    "n_shots", "set_id", "split", "duplication"])
        for c in cells:
            w.writerow([c.cell_id[0], c.cell_id[1], *c.bounds,
                        len(c.shot_indices), c.set_id, c.split, c.duplication])
