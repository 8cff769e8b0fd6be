"""2D patch-feature grids: construction, tissue grouping, crop sampling, augmentation and I/O."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from gridslide._io import Reader, atomic_write_bytes, atomic_write_text
from gridslide.errors import ConfigError, DataError

GRID_MAGIC = b"GRID"
GRID_VERSION = 1

REGION_SIZE = 16
GLOBAL_SIZE = 14
LOCAL_SIZE = 6
N_GLOBAL = 2
N_LOCAL = 10


@dataclass
class FeatureGrid:
    features: np.ndarray  # (H, W, D)
    mask: np.ndarray  # (H, W) bool, True = tissue
    patch_size_px: int = 512
    magnification: str = "20x"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.ndim != 3 or self.features.shape[:2] != self.mask.shape:
            raise DataError(f"features {self.features.shape} do not match mask {self.mask.shape}")
        if self.mask.shape[0] < 1 or self.mask.shape[1] < 1:
            raise DataError("grid must be at least 1x1")
        if not self.mask.any():
            raise DataError("grid has no tissue cells")
        if np.any(self.features[~self.mask] != 0):
            raise DataError("features at background cells must be zero")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def n_tissue(self) -> int:
        return int(self.mask.sum())

    def as_view(self) -> "CropView":
        """The whole grid as a (possibly rectangular) token view."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return CropView(self.features.copy(), self.mask.copy(), np.stack([rows, cols], axis=-1))


@dataclass
class TissueGroup:
    members: list[tuple[int, int]]
    bbox: tuple[int, int, int, int]  # row0, col0, row1 (excl), col1 (excl)

    def __len__(self) -> int:
        return len(self.members)

    def mask_like(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        r, c = zip(*self.members)
        m[list(r), list(c)] = True
        return m


@dataclass
class CropView:
    """A window of tokens with the grid coordinates they came from."""

    features: np.ndarray  # (h, w, D)
    mask: np.ndarray  # (h, w)
    coords: np.ndarray  # (h, w, 2) integer (row, col) in the source grid

    @property
    def side(self) -> int:
        h, w = self.mask.shape
        if h != w:
            raise DataError(f"view is {h}x{w}, not square")
        return h

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def tokens(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row-major flattened (features (N, D), coords (N, 2), mask (N,))."""
        h, w = self.mask.shape
        return (self.features.reshape(h * w, -1), self.coords.reshape(h * w, 2), self.mask.reshape(h * w))

    def crop(self, r0: int, c0: int, h: int, w: int) -> "CropView":
        return CropView(
            self.features[r0:r0 + h, c0:c0 + w].copy(),
            self.mask[r0:r0 + h, c0:c0 + w].copy(),
            self.coords[r0:r0 + h, c0:c0 + w].copy(),
        )


@dataclass
class ViewSet:
    region: CropView
    globals: list[CropView] = field(default_factory=list)
    locals: list[CropView] = field(default_factory=list)
    global_offsets: list[tuple[int, int]] = field(default_factory=list)
    local_offsets: list[tuple[int, int]] = field(default_factory=list)

    def all_views(self) -> list[CropView]:
        return [*self.globals, *self.locals]


# -- construction -------------------------------------------------------------

def build_grid(items: Sequence[tuple[int, int, np.ndarray]], patch_size_px: int = 512,
               magnification: str = "20x") -> FeatureGrid:
    """Arrange (pixel_x, pixel_y, feature) patches into the tight bounding grid."""
    if len(items) == 0:
        raise DataError("cannot build a grid from zero patches")
    xs = np.array([int(it[0]) for it in items])
    ys = np.array([int(it[1]) for it in items])
    if np.any(xs % patch_size_px) or np.any(ys % patch_size_px):
        raise DataError(f"patch coordinates must be multiples of {patch_size_px}")
    cols = xs // patch_size_px
    rows = ys // patch_size_px
    cells = set()
    for r, c in zip(rows.tolist(), cols.tolist()):
        if (r, c) in cells:
            raise DataError(f"duplicate patch at cell (row={r}, col={c})")
        cells.add((r, c))
    rows -= rows.min()
    cols -= cols.min()
    feats = np.stack([np.asarray(it[2], dtype=np.float64) for it in items])
    h, w, d = int(rows.max()) + 1, int(cols.max()) + 1, feats.shape[1]
    features = np.zeros((h, w, d))
    mask = np.zeros((h, w), dtype=bool)
    features[rows, cols] = feats
    mask[rows, cols] = True
    return FeatureGrid(features, mask, patch_size_px, magnification)


_EIGHT = np.ones((3, 3), dtype=bool)


def group_tissue(grid: FeatureGrid, min_patches: int = 16) -> list[TissueGroup]:
    """8-connected tissue components with at least ``min_patches`` cells."""
    labels, n = ndimage.label(grid.mask, structure=_EIGHT)
    groups = []
    for lab in range(1, n + 1):
        rr, cc = np.nonzero(labels == lab)
        if rr.size < min_patches:
            continue
        members = sorted(zip(rr.tolist(), cc.tolist()))
        bbox = (int(rr.min()), int(cc.min()), int(rr.max()) + 1, int(cc.max()) + 1)
        groups.append(TissueGroup(members, bbox))
    groups.sort(key=lambda g: (g.bbox[0], g.bbox[1]))
    return groups


# -- sampling -----------------------------------------------------------------

def _pad_to(grid: FeatureGrid, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = grid.mask.shape
    H, W = max(h, size), max(w, size)
    feats = np.zeros((H, W, grid.dim))
    mask = np.zeros((H, W), dtype=bool)
    feats[:h, :w] = grid.features
    mask[:h, :w] = grid.mask
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return feats, mask, np.stack([rows, cols], axis=-1)


def valid_offsets(target: np.ndarray, size: int) -> np.ndarray:
    """All (r0, c0) whose size x size window covers at least one True cell of ``target``."""
    H, W = target.shape
    integral = np.zeros((H + 1, W + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(target, axis=0), axis=1)
    counts = (integral[size:, size:] - integral[:-size, size:]
              - integral[size:, :-size] + integral[:-size, :-size])
    return np.argwhere(counts > 0)


def sample_region_crop(grid: FeatureGrid, size: int = REGION_SIZE, rng: np.random.Generator | None = None,
                       group: TissueGroup | None = None) -> CropView:
    """Uniformly random size x size window containing at least one tissue cell.

    Grids smaller than ``size`` are zero padded (mask False) at the bottom and
    right, with coordinates continuing past the grid edge. When ``group`` is
    given the window must hit that group.
    """
    if rng is None:
        raise ConfigError("sample_region_crop needs an explicit rng")
    if not grid.mask.any():
        raise DataError("grid has no tissue")
    feats, mask, coords = _pad_to(grid, size)
    target = mask
    if group is not None:
        target = np.zeros_like(mask)
        target[: grid.height, : grid.width] = group.mask_like(grid.mask.shape)
    offsets = valid_offsets(target, size)
    if len(offsets) == 0:
        raise DataError("no window contains tissue")
    r0, c0 = offsets[rng.integers(len(offsets))]
    return CropView(
        feats[r0:r0 + size, c0:c0 + size].copy(),
        mask[r0:r0 + size, c0:c0 + size].copy(),
        coords[r0:r0 + size, c0:c0 + size].copy(),
    )


def sample_views(region: CropView, rng: np.random.Generator, n_global: int = N_GLOBAL,
                 global_size: int = GLOBAL_SIZE, n_local: int = N_LOCAL, local_size: int = LOCAL_SIZE,
                 region_size: int = REGION_SIZE) -> ViewSet:
    """Global and local sub-crops at uniform offsets; plain copies, no resampling."""
    if region.shape != (region_size, region_size):
        raise DataError(f"region must be {region_size}x{region_size}, got {region.shape}")
    vs = ViewSet(region=region)
    for _ in range(n_global):
        r0, c0 = (int(v) for v in rng.integers(0, region_size - global_size + 1, size=2))
        vs.globals.append(region.crop(r0, c0, global_size, global_size))
        vs.global_offsets.append((r0, c0))
    for _ in range(n_local):
        r0, c0 = (int(v) for v in rng.integers(0, region_size - local_size + 1, size=2))
        vs.locals.append(region.crop(r0, c0, local_size, local_size))
        vs.local_offsets.append((r0, c0))
    return vs


# -- augmentation -------------------------------------------------------------

def posterize(values: np.ndarray, bits: int, lo: float, hi: float) -> np.ndarray:
    """Snap to the nearest of 2**bits evenly spaced levels spanning [lo, hi]."""
    if bits < 1:
        raise ConfigError(f"posterize bits must be >= 1, got {bits}")
    if hi <= lo:
        return values.copy()
    steps = 2 ** bits - 1
    idx = np.clip(np.rint((values - lo) / (hi - lo) * steps), 0, steps)
    return lo + idx * (hi - lo) / steps


def augment(view: CropView, flip_h: bool = False, flip_v: bool = False,
            posterize_bits: int | None = None) -> CropView:
    """Flip features, mask and coords together; optionally posterize tissue values."""
    if posterize_bits is not None and posterize_bits < 1:
        raise ConfigError(f"posterize bits must be >= 1, got {posterize_bits}")
    f, m, c = view.features, view.mask, view.coords
    if flip_h:
        f, m, c = f[:, ::-1], m[:, ::-1], c[:, ::-1]
    if flip_v:
        f, m, c = f[::-1], m[::-1], c[::-1]
    f, m, c = f.copy(), m.copy(), c.copy()
    if posterize_bits is not None and m.any():
        tissue = f[m]
        f[m] = posterize(tissue, posterize_bits, float(tissue.min()), float(tissue.max()))
    return CropView(f, m, c)


def random_augment(view: CropView, rng: np.random.Generator, p_flip: float = 0.5,
                   posterize_bits: int = 5, p_posterize: float = 0.2) -> CropView:
    flip_h = bool(rng.random() < p_flip)
    flip_v = bool(rng.random() < p_flip)
    bits = posterize_bits if rng.random() < p_posterize else None
    return augment(view, flip_h, flip_v, bits)


# -- files --------------------------------------------------------------------

def encode_grid(grid: FeatureGrid) -> bytes:
    h, w, d = grid.features.shape
    header = GRID_MAGIC + struct.pack("<IIIII", GRID_VERSION, h, w, d, grid.patch_size_px)
    bits = np.packbits(grid.mask.reshape(-1).astype(np.uint8)).tobytes()
    return header + bits + np.ascontiguousarray(grid.features, dtype="<f4").tobytes()


def decode_grid(buf: bytes, source: str = "<buffer>") -> FeatureGrid:
    r = Reader(buf, source)
    r.expect_magic(GRID_MAGIC)
    version, h, w, d, ps = r.unpack("<IIIII")
    if version != GRID_VERSION:
        raise DataError(f"{source}: unsupported grid version {version}")
    nbytes = (h * w + 7) // 8
    mask = np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8))[: h * w].astype(bool).reshape(h, w)
    feats = np.frombuffer(r.take(4 * h * w * d), dtype="<f4").reshape(h, w, d).astype(np.float64)
    if not r.at_end():
        raise DataError(f"{source}: trailing bytes")
    return FeatureGrid(feats, mask, ps)


def write_grid(path: str | os.PathLike, grid: FeatureGrid) -> None:
    atomic_write_bytes(path, encode_grid(grid))


def read_grid(path: str | os.PathLike) -> FeatureGrid:
    with open(path, "rb") as fh:
        return decode_grid(fh.read(), str(path))


@dataclass
class ManifestEntry:
    slide_id: str
    label: int
    path: Path


def write_manifest(path: str | os.PathLike, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    lines = ["#slide_id\tlabel\tpath"]
    for e in entries:
        rel = os.path.relpath(e.path, path.parent) if Path(e.path).is_absolute() else str(e.path)
        lines.append(f"{e.slide_id}\t{e.label}\t{rel}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        p = Path(parts[2])
        out.append(ManifestEntry(parts[0], int(parts[1]), p if p.is_absolute() else path.parent / p))
    return out
