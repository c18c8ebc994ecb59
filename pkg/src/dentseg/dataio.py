"""On-disk formats: dataset container, scan grids, overlay images.

Dataset container (all little-endian)::

    header  : b"DENT" | u32 version | u32 count | u32 w | u32 h
              | f32 world_x | f32 world_y | u32 flags
    record  : f32[h][w][3] xyz | u8[h][w] mask (if FLAG_MASK) | u32 crc32(record bytes)

Binary scan grid::

    b"XYZG" | u32 w | u32 h | f32[h][w][3] xyz
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .grid import GridError, LabelMask, ResidualGrid, SurfaceGrid

DATASET_MAGIC = b"DENT"
DATASET_VERSION = 1
FLAG_MASK = 1
FLAG_NOISE = 2
_HEADER = struct.Struct("<4sIIIIffI")

GRID_MAGIC = b"XYZG"


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    def __init__(self, index: int):
        super().__init__(f"checksum mismatch in record {index}")
        self.index = index


class TruncatedError(FormatError):
    pass


def atomic_write(path, data: bytes):
    """Write via a temporary file in the target directory and rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class DatasetHeader:
    count: int
    width: int
    height: int
    world_x: float = 0.0
    world_y: float = 0.0
    flags: int = FLAG_MASK
    version: int = DATASET_VERSION

    @property
    def has_mask(self) -> bool:
        return bool(self.flags & FLAG_MASK)

    @property
    def record_size(self) -> int:
        n = self.width * self.height
        return 12 * n + (n if self.has_mask else 0) + 4


class DatasetWriter:
    """Streaming writer; the file appears at ``path`` only after :meth:`close`."""

    def __init__(self, path, width: int, height: int, world_x: float = 0.0, world_y: float = 0.0,
                 has_mask: bool = True, noise: bool = False):
        self.path = Path(path)
        self.header = DatasetHeader(0, width, height, world_x, world_y,
                                    (FLAG_MASK if has_mask else 0) | (FLAG_NOISE if noise else 0))
        fd, self._tmp = tempfile.mkstemp(dir=self.path.parent or ".", prefix=f".{self.path.name}.")
        self._f = os.fdopen(fd, "wb")
        self._f.write(b"\0" * _HEADER.size)
        self.count = 0

    def write(self, points: np.ndarray, mask: np.ndarray | None = None):
        h, w = self.header.height, self.header.width
        pts = np.asarray(points.points if isinstance(points, SurfaceGrid) else points)
        if pts.shape != (h, w, 3):
            raise FormatError(f"record shape {pts.shape} != header {(h, w, 3)}")
        rec = pts.astype("<f4").tobytes()
        if self.header.has_mask:
            m = np.asarray(mask.values if isinstance(mask, LabelMask) else mask)
            if m.shape != (h, w):
                raise FormatError(f"mask shape {m.shape} != header {(h, w)}")
            rec += m.astype(np.uint8).tobytes()
        self._f.write(rec + struct.pack("<I", zlib.crc32(rec)))
        self.count += 1

    def close(self):
        if self._f.closed:
            return
        hd = self.header
        self._f.seek(0)
        self._f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, self.count, hd.width, hd.height,
                                   hd.world_x, hd.world_y, hd.flags))
        self._f.close()
        os.replace(self._tmp, self.path)

    def abort(self):
        if not self._f.closed:
            self._f.close()
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_dataset(path, samples, width: int | None = None, height: int | None = None,
                  world=(0.0, 0.0)) -> int:
    """Write labelled samples (or (SurfaceGrid, LabelMask) pairs); returns the count."""
    writer = None
    try:
        for s in samples:
            surface, truth = (s.surface, s.truth) if hasattr(s, "surface") else s
            if writer is None:
                writer = DatasetWriter(path, width or surface.width, height or surface.height, *world)
            writer.write(surface, truth)
        if writer is None:
            if width is None or height is None:
                raise FormatError("empty dataset needs explicit width and height")
            writer = DatasetWriter(path, width, height, *world)
        writer.close()
    except BaseException:
        if writer is not None:
            writer.abort()
        raise
    return writer.count


def read_header(f) -> DatasetHeader:
    raw = f.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise BadMagicError("not a dataset container (bad magic)")
    if len(raw) < _HEADER.size:
        raise TruncatedError("dataset header truncated")
    magic, version, count, w, h, wx, wy, flags = _HEADER.unpack(raw)
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    return DatasetHeader(count, w, h, wx, wy, flags, version)


def iter_records(path) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """Yield (xyz float32 (h, w, 3), mask uint8 (h, w) or None), one record in memory at a time."""
    with open(path, "rb") as f:
        hd = read_header(f)
        n = hd.width * hd.height
        size = hd.record_size
        for i in range(hd.count):
            raw = f.read(size)
            if len(raw) < size:
                raise TruncatedError(f"record {i} truncated ({len(raw)} of {size} bytes)")
            body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
            if zlib.crc32(body) != crc:
                raise ChecksumError(i)
            xyz = np.frombuffer(body, "<f4", 3 * n).reshape(hd.height, hd.width, 3)
            mask = np.frombuffer(body, np.uint8, n, 12 * n).reshape(hd.height, hd.width) if hd.has_mask else None
            yield xyz, mask


def read_dataset(path) -> Iterator[tuple[SurfaceGrid, LabelMask | None]]:
    """Stream (SurfaceGrid, LabelMask) pairs from a container."""
    with open(path, "rb") as f:
        hd = read_header(f)
    pitch = hd.world_x / hd.width if hd.world_x else 1.0
    for xyz, mask in iter_records(path):
        yield SurfaceGrid(xyz, pitch), (LabelMask(mask) if mask is not None else None)


def dataset_header(path) -> DatasetHeader:
    with open(path, "rb") as f:
        return read_header(f)


# -- noise banks --------------------------------------------------------------


def write_noise_bank(path, bank):
    """Store each noise map as a record whose z holds the residual (x, y are pixel indices)."""
    maps = bank.maps
    if not maps:
        raise FormatError("cannot store an empty noise bank")
    w = max(m.shape[1] for m in maps)
    h = max(m.shape[0] for m in maps)
    if any(m.shape != (h, w) for m in maps):
        raise FormatError("all noise maps in one container must share a size")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    with DatasetWriter(path, w, h, has_mask=False, noise=True) as wr:
        for m in maps:
            wr.write(np.stack([xx, yy, m.residuals.values], axis=-1))


def read_noise_bank(path):
    from .noisebank import NoiseBank, NoiseMap

    maps = [NoiseMap(ResidualGrid(xyz[..., 2]), f"{Path(path).name}#{i}")
            for i, (xyz, _) in enumerate(iter_records(path))]
    return NoiseBank(tuple(maps))


# -- scan grids ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RasterResult:
    grid: SurfaceGrid
    gaps: np.ndarray  # bool (h, w): cell held no source point and was filled


def _parse_rows(path) -> list[list[float]]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            try:
                rows.append((lineno, [float(t) for t in s.replace(",", " ").split()]))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: malformed number ({e})") from None
    if not rows:
        raise FormatError(f"{path}: empty file")
    return rows


def read_cloud(path, fmt: str | None = None, pitch: float | None = None,
               shape: tuple[int, int] | None = None):
    """Load a scan as a :class:`SurfaceGrid`.

    Formats: ``grid`` (text, one grid row per line as x y z x y z ...),
    ``binary`` (``XYZG`` container) and ``points`` (text, one unordered
    ``x y z`` point per line, rasterised onto a lattice; returns a
    :class:`RasterResult`). The format is guessed from the file when omitted.
    """
    path = Path(path)
    if fmt is None:
        with open(path, "rb") as f:
            head = f.read(4)
        fmt = "binary" if head == GRID_MAGIC else "grid"
    if fmt == "binary":
        return _read_binary_grid(path)
    rows = _parse_rows(path)
    if fmt == "points":
        pts = []
        for lineno, vals in rows:
            if len(vals) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 values per point, got {len(vals)}")
            pts.append(vals)
        return rasterize(np.array(pts), pitch=pitch, shape=shape)
    if fmt != "grid":
        raise FormatError(f"unknown cloud format {fmt!r}")
    expected = len(rows[0][1])
    if expected == 0 or expected % 3:
        raise FormatError(f"{path}:{rows[0][0]}: row has {expected} values, not a multiple of 3")
    for lineno, vals in rows:
        if len(vals) != expected:
            raise FormatError(f"{path}:{lineno}: row has {len(vals)} values where {expected} expected")
    pts = np.array([v for _, v in rows], dtype=np.float64).reshape(len(rows), expected // 3, 3)
    return SurfaceGrid(pts, pitch or _nominal_pitch(pts))


def _nominal_pitch(pts: np.ndarray) -> float:
    if pts.shape[1] > 1:
        d = np.linalg.norm(np.diff(pts[..., :2], axis=1), axis=-1)
        return float(np.median(d))
    return 1.0


def _read_binary_grid(path) -> SurfaceGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise BadMagicError(f"{path}: not a binary scan grid")
    if len(raw) < 12:
        raise TruncatedError(f"{path}: header truncated")
    w, h = struct.unpack_from("<II", raw, 4)
    need = 12 + 12 * w * h
    if len(raw) != need:
        raise TruncatedError(f"{path}: expected {need} bytes, found {len(raw)}")
    pts = np.frombuffer(raw, "<f4", 3 * w * h, 12).reshape(h, w, 3).astype(np.float64)
    return SurfaceGrid(pts, _nominal_pitch(pts))


def write_cloud(path, grid: SurfaceGrid, fmt: str = "binary"):
    if fmt == "binary":
        atomic_write(path, GRID_MAGIC + struct.pack("<II", grid.width, grid.height)
                     + grid.points.astype("<f4").tobytes())
    elif fmt == "grid":
        lines = [" ".join(f"{v:.9g}" for v in row.reshape(-1)) for row in grid.points]
        atomic_write(path, ("\n".join(lines) + "\n").encode())
    else:
        raise FormatError(f"unknown cloud format {fmt!r}")


def rasterize(points: np.ndarray, pitch: float | None = None,
              shape: tuple[int, int] | None = None) -> RasterResult:
    """Bin unordered points onto a regular xy lattice.

    Each cell keeps the point closest to its centre; empty cells take the z of
    the nearest filled cell and are flagged in ``gaps``. ``shape`` is (h, w).
    """
    from scipy import ndimage

    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
        raise FormatError("rasterize needs a non-empty (n, 3) point array")
    lo = p[:, :2].min(axis=0)
    hi = p[:, :2].max(axis=0)
    if shape is None:
        if pitch is None:
            pitch = float(np.sqrt(np.prod(np.maximum(hi - lo, 1e-12)) / len(p)))
        w = int(np.floor((hi[0] - lo[0]) / pitch)) + 1
        h = int(np.floor((hi[1] - lo[1]) / pitch)) + 1
        px = py = pitch
    else:
        h, w = shape
        px = (hi[0] - lo[0]) / max(w - 1, 1) if w > 1 else 1.0
        py = (hi[1] - lo[1]) / max(h - 1, 1) if h > 1 else 1.0
        pitch = (px + py) / 2
    col = np.clip(np.rint((p[:, 0] - lo[0]) / px).astype(int), 0, w - 1)
    row = np.clip(np.rint((p[:, 1] - lo[1]) / py).astype(int), 0, h - 1)
    cx = lo[0] + col * px
    cy = lo[1] + row * py
    dist = (p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2
    cell = row * w + col
    # closest point per cell: sort by (cell, dist) and keep the first of each cell
    order = np.lexsort((dist, cell))
    first = np.ones(len(order), bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    keep = order[first]
    grid = np.full((h * w, 3), np.nan)
    grid[cell[keep]] = p[keep]
    grid = grid.reshape(h, w, 3)
    gaps = np.isnan(grid[..., 2])
    if gaps.all():
        raise FormatError("rasterisation produced no filled cells")
    if gaps.any():
        idx = ndimage.distance_transform_edt(gaps, return_distances=False, return_indices=True)
        yy, xx = np.mgrid[0:h, 0:w]
        grid[..., 0] = np.where(gaps, lo[0] + xx * px, grid[..., 0])
        grid[..., 1] = np.where(gaps, lo[1] + yy * py, grid[..., 1])
        grid[..., 2] = np.where(gaps, grid[..., 2][idx[0], idx[1]], grid[..., 2])
    return RasterResult(SurfaceGrid(grid, pitch), gaps)


# -- overlays -----------------------------------------------------------------

GREEN = (0, 200, 0)
RED = (220, 0, 0)
BLUE = (0, 0, 230)


def overlay_rgb(background, pred, truth=None) -> np.ndarray:
    """RGB array: grayscale background with TP green, FP red, FN blue.

    Without ``truth`` every predicted cell is green.
    """
    if isinstance(background, SurfaceGrid):
        bg = background.z
    else:
        bg = np.asarray(getattr(background, "values", background), dtype=np.float64)
    p = np.asarray(getattr(pred, "values", pred)).astype(bool)
    if p.shape != bg.shape:
        raise GridError(f"prediction {p.shape} does not match background {bg.shape}")
    lo, hi = np.percentile(bg, [1, 99]) if bg.size > 1 else (bg.min(), bg.max())
    gray = np.clip((bg - lo) / (hi - lo) if hi > lo else np.zeros_like(bg), 0, 1)
    gray = (40 + 175 * gray).astype(np.uint8)
    img = np.repeat(gray[..., None], 3, axis=2)
    if truth is None:
        img[p] = GREEN
        return img
    t = np.asarray(getattr(truth, "values", truth)).astype(bool)
    if t.shape != p.shape:
        raise GridError(f"truth {t.shape} does not match prediction {p.shape}")
    img[p & t] = GREEN
    img[p & ~t] = RED
    img[~p & t] = BLUE
    return img


def write_overlay(background, pred, path, truth=None, scale: int = 1):
    """Save :func:`overlay_rgb` as a PNG (nearest-neighbour upscaled by ``scale``)."""
    from PIL import Image

    img = overlay_rgb(background, pred, truth)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(img, "RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path
