"""Synthetic long-tailed tile datasets: generation, tiling, splits, loading.

A seeded procedural terrain generator stands in for field imagery. It places
sparse "structure" motifs (closed polygonal stone outlines) on multi-octave
noise terrain and records their footprints in a ground-truth mask, so that
tile labels and pseudo-label purity are exactly measurable.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

LABEL_POS = "pos"
LABEL_NEG = "neg"
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["tile_id", "path", "block_id", "label", "split"]

# Earth-tone ramp for terrain; structure outlines sit a variable lift above
# the local terrain brightness so their contrast is scarce, as in the field
# setting where structures share the background's material.
_TERRAIN_LOW = np.array([72, 76, 58], dtype=np.float32)
_TERRAIN_HIGH = np.array([156, 138, 108], dtype=np.float32)
_STONE_TINT = np.array([1.06, 1.04, 1.08], dtype=np.float32)

# Which pipeline phase is currently reading tiles; used by leakage audits.
access_phase: contextvars.ContextVar[str] = contextvars.ContextVar("access_phase", default="-")


@contextlib.contextmanager
def dataset_phase(name: str):
    """Tag all tile reads inside the block with a phase name."""
    token = access_phase.set(name)
    try:
        yield
    finally:
        access_phase.reset(token)


@dataclass
class SynthConfig:
    """Knobs for the procedural region generator."""

    canvas_size: int = 2048
    tile_size: int = 64
    target_positive_ratio: float = 0.01
    structure_size_range: tuple[int, int] = (12, 28)
    texture_seed: int = 0
    noise_octaves: int = 5
    noise_amplitude: float = 0.55
    cluster_prob: float = 0.5
    cluster_radius_tiles: float = 1.5

    def __post_init__(self):
        if self.canvas_size < self.tile_size:
            raise ConfigError(
                f"canvas {self.canvas_size} too small to hold one {self.tile_size}px tile"
            )
        # Ratio 0 is the documented degenerate case (no structures at all).
        if not (0.0 <= self.target_positive_ratio <= 0.5):
            raise ConfigError(
                f"target_positive_ratio must lie in [0, 0.5], got {self.target_positive_ratio}"
            )
        lo, hi = self.structure_size_range
        if not (2 <= lo <= hi):
            raise ConfigError(f"bad structure_size_range {self.structure_size_range}")
        if hi >= self.tile_size:
            raise ConfigError("structures must be smaller than a tile")
        if self.noise_octaves < 1:
            raise ConfigError("need at least one noise octave")


@dataclass
class StructurePlacement:
    center_x: int
    center_y: int
    size: int
    vertex_count: int
    tiles: tuple[tuple[int, int], ...]  # tile grid cells this motif marks


@dataclass
class SynthRegion:
    raster: np.ndarray                    # H x W x 3 uint8
    mask: np.ndarray                      # H x W bool, structure footprints
    placements: list[StructurePlacement]
    target_positive_tiles: int
    positive_tiles: int


@dataclass
class TileRecord:
    tile_id: str
    path: str
    block_id: int
    label: str | None
    split: str | None


class TileDataset:
    """A manifest of tiles plus access to their pixels.

    Pixels live either in memory (freshly generated) or on disk under
    ``root`` as 8-bit PNGs. Immutable after construction apart from the
    pixel cache and the access log.
    """

    def __init__(self, records: list[TileRecord], root: Path | None = None,
                 pixels: dict[str, np.ndarray] | None = None):
        self.records = records
        self.root = Path(root) if root is not None else None
        self._pixels = pixels if pixels is not None else {}
        self.access_log: list[tuple[str, str]] = []

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> dict[str, int]:
        out = {"pos": 0, "neg": 0, "unlabeled": 0}
        for r in self.records:
            out["unlabeled" if r.label is None else r.label] += 1
        return out

    @property
    def class_ratio(self) -> float | None:
        c = self.counts()
        return c["pos"] / c["neg"] if c["neg"] else None

    def block_ids(self) -> set[int]:
        return {r.block_id for r in self.records}

    def pixels(self, index: int) -> np.ndarray:
        r = self.records[index]
        if r.tile_id not in self._pixels:
            if self.root is None or not r.path:
                raise DatasetError(f"tile {r.tile_id} has no pixels in memory or on disk")
            img = cv2.imread(str(self.root / r.path), cv2.IMREAD_COLOR)
            if img is None:
                raise DatasetError(f"failed to read tile image {self.root / r.path}")
            self._pixels[r.tile_id] = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        return self._pixels[r.tile_id]

    def preload(self) -> None:
        for i in range(len(self.records)):
            self.pixels(i)

    def subset(self, split: str) -> "TileDataset":
        recs = [r for r in self.records if r.split == split]
        return TileDataset(recs, root=self.root, pixels=self._pixels)

    def save(self, root: str | Path) -> Path:
        """Write PNG tree keyed by split plus the manifest CSV."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        written: set[str] = set()
        out_records: list[TileRecord] = []
        for i, r in enumerate(self.records):
            rel = f"tiles/{r.split or 'unsplit'}/{r.tile_id}.png"
            if rel not in written:
                dst = root / rel
                dst.parent.mkdir(parents=True, exist_ok=True)
                px = self.pixels(i)
                cv2.imwrite(str(dst), cv2.cvtColor(px, cv2.COLOR_RGB2BGR))
                written.add(rel)
            out_records.append(replace(r, path=rel))
        self.records = out_records
        self.root = root
        write_manifest(root / MANIFEST_NAME, self.records)
        return root

    @classmethod
    def load(cls, root: str | Path) -> "TileDataset":
        root = Path(root)
        manifest = root / MANIFEST_NAME
        if not manifest.exists():
            raise DatasetError(f"no {MANIFEST_NAME} under {root}")
        return cls(read_manifest(manifest), root=root)

    def _log_access(self, indices) -> None:
        phase = access_phase.get()
        for i in indices:
            split = self.records[i].split or "-"
            self.access_log.append((split, phase))


def write_manifest(path: str | Path, records: list[TileRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.tile_id, r.path, r.block_id, r.label or "-", r.split or "-"])


def read_manifest(path: str | Path) -> list[TileRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"unexpected manifest header {header}")
        for tile_id, rel, block_id, label, split in reader:
            records.append(TileRecord(
                tile_id=tile_id,
                path=rel,
                block_id=int(block_id),
                label=None if label == "-" else label,
                split=None if split == "-" else split,
            ))
    return records


def _octave_noise(rng: np.random.Generator, size: int, octaves: int, amplitude: float) -> np.ndarray:
    """Multi-octave value noise in [0, 1]."""
    out = np.zeros((size, size), dtype=np.float32)
    amp = 1.0
    for o in range(octaves):
        cells = min(size, 4 * (2 ** o))
        grid = rng.random((cells, cells), dtype=np.float32)
        out += amp * cv2.resize(grid, (size, size), interpolation=cv2.INTER_LINEAR)
        amp *= amplitude
    out -= out.min()
    peak = out.max()
    if peak > 0:
        out /= peak
    return out


def _ring_patch(rng: np.random.Generator, size: int) -> tuple[np.ndarray, int]:
    """Rasterize one weathered closed polygonal outline onto a small patch."""
    n_vertices = int(rng.integers(5, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = rng.uniform(0.6, 1.0, n_vertices) * (size / 2.0)
    cx = cy = size / 2.0
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    patch = np.zeros((size, size), dtype=np.uint8)
    thickness = max(1, size // 12)
    cv2.polylines(patch, [np.round(pts).astype(np.int32)], isClosed=True,
                  color=1, thickness=thickness)
    # erode parts of the wall so outlines are broken, not crisp
    keep = rng.random(patch.shape) < 0.9
    patch &= keep
    if not patch.any():
        patch[size // 2, size // 2] = 1
    return patch.astype(bool), n_vertices


def _touched_tiles(patch: np.ndarray, x0: int, y0: int, tile: int) -> set[tuple[int, int]]:
    ys, xs = np.nonzero(patch)
    return set(zip(((ys + y0) // tile).tolist(), ((xs + x0) // tile).tolist()))


def generate_synthetic_region(cfg: SynthConfig, seed: int) -> SynthRegion:
    """Render terrain with sparse structure motifs and their ground-truth mask.

    Placement stops once the number of mask-marked tiles reaches
    round(target_positive_ratio * tile_count) exactly; candidate placements
    that would overshoot are rejected and retried, falling back to a
    placement confined inside a single untouched tile.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.texture_seed, seed]))
    size = cfg.canvas_size
    tile = cfg.tile_size

    height = _octave_noise(rng, size, cfg.noise_octaves, cfg.noise_amplitude)
    raster = _TERRAIN_LOW + height[..., None] * (_TERRAIN_HIGH - _TERRAIN_LOW)
    raster += rng.normal(0.0, 5.0, raster.shape).astype(np.float32)

    n_grid = size // tile
    n_tiles = n_grid * n_grid
    usable = n_grid * tile  # keep motifs inside the area that will be tiled
    target = int(round(cfg.target_positive_ratio * n_tiles))

    mask = np.zeros((size, size), dtype=bool)
    touched: set[tuple[int, int]] = set()
    placements: list[StructurePlacement] = []
    lo, hi = cfg.structure_size_range
    last_center: tuple[int, int] | None = None

    while len(touched) < target:
        remaining = target - len(touched)
        placed = False
        for _ in range(12):
            s = int(rng.integers(lo, hi + 1))
            if last_center is not None and rng.random() < cfg.cluster_prob:
                radius = cfg.cluster_radius_tiles * tile
                cx = int(np.clip(last_center[0] + rng.normal(0, radius), s, usable - s - 1))
                cy = int(np.clip(last_center[1] + rng.normal(0, radius), s, usable - s - 1))
            else:
                cx = int(rng.integers(s, usable - s))
                cy = int(rng.integers(s, usable - s))
            patch, n_vertices = _ring_patch(rng, s)
            x0, y0 = cx - s // 2, cy - s // 2
            new_tiles = _touched_tiles(patch, x0, y0, tile) - touched
            if 0 < len(new_tiles) <= remaining:
                placed = True
                break
        if not placed:
            # Confine the motif to one untouched tile so progress is certain.
            free = [t for t in ((r, c) for r in range(n_grid) for c in range(n_grid))
                    if t not in touched]
            tr, tc = free[int(rng.integers(len(free)))]
            s = min(hi, tile - 4)
            patch, n_vertices = _ring_patch(rng, s)
            pad = (tile - s) // 2
            x0, y0 = tc * tile + pad, tr * tile + pad
            cx, cy = x0 + s // 2, y0 + s // 2
            new_tiles = _touched_tiles(patch, x0, y0, tile) - touched

        ys, xs = np.nonzero(patch)
        # stone brightness rides on the local terrain with a variable lift,
        # so some structures are faint and none are flat-colored
        lift = rng.uniform(26.0, 60.0)
        texture = rng.normal(0.0, 8.0, (len(ys), 3)).astype(np.float32)
        local = raster[ys + y0, xs + x0]
        raster[ys + y0, xs + x0] = local * _STONE_TINT + lift + texture
        mask[ys + y0, xs + x0] = True
        touched |= new_tiles
        last_center = (cx, cy)
        placements.append(StructurePlacement(
            center_x=cx, center_y=cy, size=s, vertex_count=n_vertices,
            tiles=tuple(sorted(new_tiles)),
        ))

    raster = np.clip(raster, 0, 255).astype(np.uint8)
    return SynthRegion(
        raster=raster,
        mask=mask,
        placements=placements,
        target_positive_tiles=target,
        positive_tiles=len(touched),
    )


def tile_region(
    raster: np.ndarray,
    mask: np.ndarray | None,
    tile_size: int,
    pixel_threshold: int = 1,
    block_side: int = 4,
) -> TileDataset:
    """Cut a raster into non-overlapping labeled tiles.

    A tile is positive iff at least ``pixel_threshold`` mask pixels fall in
    its footprint. ``block_id`` is the coarse grid cell of ``block_side``
    tiles per side, for contamination-safe splitting. All-zero (defective)
    tiles are dropped.
    """
    if raster is None or raster.size == 0:
        raise DatasetError("empty raster")
    h, w = raster.shape[:2]
    if h < tile_size or w < tile_size:
        raise DatasetError(f"raster {h}x{w} smaller than tile size {tile_size}")
    if mask is None:
        mask = np.zeros((h, w), dtype=bool)

    n_rows, n_cols = h // tile_size, w // tile_size
    block_cols = -(-n_cols // block_side)
    records: list[TileRecord] = []
    pixels: dict[str, np.ndarray] = {}
    defective = 0
    for r in range(n_rows):
        for c in range(n_cols):
            ys, xs = r * tile_size, c * tile_size
            px = raster[ys:ys + tile_size, xs:xs + tile_size]
            if not px.any():
                defective += 1
                continue
            overlap = int(mask[ys:ys + tile_size, xs:xs + tile_size].sum())
            tile_id = f"r{r:04d}c{c:04d}"
            records.append(TileRecord(
                tile_id=tile_id,
                path="",
                block_id=(r // block_side) * block_cols + (c // block_side),
                label=LABEL_POS if overlap >= pixel_threshold else LABEL_NEG,
                split=None,
            ))
            pixels[tile_id] = np.ascontiguousarray(px)
    if defective:
        logger.info("dropped %d defective (all-zero) tiles", defective)
    return TileDataset(records, pixels=pixels)


@dataclass
class SplitDatasets:
    train: TileDataset
    val: TileDataset
    test: TileDataset
    unlabeled: TileDataset

    def combined(self) -> TileDataset:
        records = (self.train.records + self.val.records
                   + self.test.records + self.unlabeled.records)
        pixels = self.train._pixels
        return TileDataset(records, root=self.train.root, pixels=pixels)


def split_dataset(
    ds: TileDataset,
    fractions: tuple[float, float, float],
    seed: int,
    labeled_block_fraction: float = 0.06,
    enrich_positive_fraction: float | None = None,
) -> SplitDatasets:
    """Assign blocks to {train, val, test} splits and an unlabeled pool.

    Blocks, never tiles, are the assignment unit. A configured fraction of
    blocks is withheld first: their tiles lose their labels and form the
    unlabeled pool. The remaining labeled blocks are dealt to the three
    splits by a largest-deficit greedy that tracks tile-count targets.

    ``enrich_positive_fraction`` biases the labeled-block choice toward
    structure-bearing blocks until the labeled pool reaches roughly that
    positive fraction (the field protocol adds known structure tiles to the
    labeled pool; block-level bias is the spatial analogue).
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    if not (0.0 < labeled_block_fraction <= 1.0):
        raise ConfigError("labeled_block_fraction must lie in (0, 1]")

    rng = np.random.default_rng(seed)
    blocks = sorted(ds.block_ids())
    n_splits_requested = sum(1 for f in fractions if f > 0)
    pos_by_block: dict[int, int] = {b: 0 for b in blocks}
    tiles_by_block: dict[int, int] = {b: 0 for b in blocks}
    for r in ds.records:
        tiles_by_block[r.block_id] += 1
        if r.label == LABEL_POS:
            pos_by_block[r.block_id] += 1

    shuffled = [blocks[i] for i in rng.permutation(len(blocks))]
    n_labeled = max(n_splits_requested, int(round(labeled_block_fraction * len(blocks))))
    if len(blocks) < n_splits_requested:
        raise DatasetError(f"only {len(blocks)} blocks for {n_splits_requested} splits")

    if enrich_positive_fraction is None:
        labeled_blocks = shuffled[:n_labeled]
    else:
        positive_blocks = [b for b in shuffled if pos_by_block[b] > 0]
        negative_blocks = [b for b in shuffled if pos_by_block[b] == 0]
        labeled_blocks = []
        n_pos_tiles = n_tiles = 0
        for _ in range(n_labeled):
            need_pos = (n_tiles == 0 or n_pos_tiles / n_tiles < enrich_positive_fraction)
            source = positive_blocks if (need_pos and positive_blocks) else (
                negative_blocks or positive_blocks)
            b = source.pop(0)
            labeled_blocks.append(b)
            n_pos_tiles += pos_by_block[b]
            n_tiles += tiles_by_block[b]

    labeled_set = set(labeled_blocks)
    labeled_tiles = sum(tiles_by_block[b] for b in labeled_blocks)

    # Integer tile targets per split via largest remainder.
    raw = [f * labeled_tiles for f in fractions]
    targets = [int(t) for t in raw]
    for i in sorted(range(3), key=lambda i: raw[i] - targets[i], reverse=True):
        if sum(targets) < labeled_tiles:
            targets[i] += 1
    assigned = [0, 0, 0]
    split_names = ("train", "val", "test")
    split_of_block: dict[int, str] = {}
    for b in labeled_blocks:
        deficits = [targets[i] - assigned[i] for i in range(3)]
        i = int(np.argmax(deficits))
        split_of_block[b] = split_names[i]
        assigned[i] += tiles_by_block[b]

    buckets: dict[str, list[TileRecord]] = {"train": [], "val": [], "test": [], "unlabeled": []}
    for r in ds.records:
        if r.block_id in labeled_set:
            name = split_of_block[r.block_id]
            buckets[name].append(replace(r, split=name))
        else:
            buckets["unlabeled"].append(replace(r, label=None, split="unlabeled"))

    make = lambda recs: TileDataset(recs, root=ds.root, pixels=ds._pixels)
    return SplitDatasets(
        train=make(buckets["train"]),
        val=make(buckets["val"]),
        test=make(buckets["test"]),
        unlabeled=make(buckets["unlabeled"]),
    )


def upsample_minority(
    train: TileDataset,
    factor: int | None = None,
    balance: bool = False,
) -> TileDataset:
    """Replicate positive manifest entries to a target count.

    ``factor`` replicates each positive that many times; ``balance`` targets
    the negative count, replicating cyclically and truncating to hit it
    exactly. Negatives are untouched; duplicated entries share pixels, and
    augmentation differentiates the copies at load time.
    """
    if factor is not None and balance:
        raise ConfigError("pass either factor or balance, not both")
    positives = [r for r in train.records if r.label == LABEL_POS]
    if not positives:
        raise DatasetError("train split contains no positives to upsample")
    n_neg = sum(1 for r in train.records if r.label == LABEL_NEG)
    if factor is not None:
        if factor < 1:
            raise ConfigError(f"factor must be >= 1, got {factor}")
        target = factor * len(positives)
    elif balance:
        target = max(n_neg, len(positives))
    else:
        raise ConfigError("pass factor or balance")

    extra = []
    i = 0
    while len(positives) + len(extra) < target:
        extra.append(replace(positives[i % len(positives)]))
        i += 1
    return TileDataset(train.records + extra, root=train.root, pixels=train._pixels)


def load_batch(ds: TileDataset, indices, resize: int) -> np.ndarray:
    """Fetch tiles as float rasters in [0, 1], bilinear-resized, channels-last."""
    indices = list(indices)
    n = len(ds.records)
    for i in indices:
        if not (0 <= i < n):
            raise DatasetError(f"index {i} out of range for dataset of {n} tiles")
    out = np.empty((len(indices), resize, resize, 3), dtype=np.float32)
    for j, i in enumerate(indices):
        px = ds.pixels(i)
        if px.shape[0] != resize or px.shape[1] != resize:
            px = cv2.resize(px, (resize, resize), interpolation=cv2.INTER_LINEAR)
        out[j] = px.astype(np.float32) / 255.0
    ds._log_access(indices)
    return out


def save_region_meta(root: str | Path, cfg: SynthConfig, seed: int, region: SynthRegion) -> None:
    """Persist the generator's placement log next to the dataset."""
    meta = {
        "seed": seed,
        "canvas_size": cfg.canvas_size,
        "tile_size": cfg.tile_size,
        "target_positive_ratio": cfg.target_positive_ratio,
        "target_positive_tiles": region.target_positive_tiles,
        "positive_tiles": region.positive_tiles,
        "placements": [
            {"x": p.center_x, "y": p.center_y, "size": p.size,
             "vertices": p.vertex_count, "tiles": [list(t) for t in p.tiles]}
            for p in region.placements
        ],
    }
    Path(root).mkdir(parents=True, exist_ok=True)
    with open(Path(root) / "region_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
