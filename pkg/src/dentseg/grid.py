"""Grid and mask types shared by the whole pipeline.

Every grid is stored row-major as an ``(h, w, ...)`` array: the row index is
the y-index and the column index is the x-index, the same addressing used for
images fed to the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Invalid grid construction or window request."""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    """Ordered ``h x w`` matrix of xyz points in millimetres."""

    points: np.ndarray
    pitch: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise GridError(f"points must have shape (h, w, 3), got {pts.shape}")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise GridError("grid must be at least 1x1")
        if not np.all(np.isfinite(pts)):
            bad = validate_finite(pts[..., 2] + pts[..., 0] + pts[..., 1])
            raise GridError(f"non-finite coordinates at {bad[:5]}")
        object.__setattr__(self, "points", _frozen(pts, np.float64))

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    @property
    def x(self) -> np.ndarray:
        return self.points[..., 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[..., 1]

    @property
    def z(self) -> np.ndarray:
        return self.points[..., 2]

    def flat(self) -> np.ndarray:
        """All points as an ``(h*w, 3)`` array."""
        return self.points.reshape(-1, 3)

    def transformed(self, rotation: np.ndarray) -> "SurfaceGrid":
        """Apply a 3x3 linear map to every point."""
        pts = self.points @ np.asarray(rotation, dtype=np.float64).T
        return SurfaceGrid(pts, self.pitch)

    def with_z(self, z: np.ndarray) -> "SurfaceGrid":
        pts = self.points.copy()
        pts[..., 2] = z
        return SurfaceGrid(pts, self.pitch)

    @classmethod
    def lattice(cls, width: int, height: int, pitch: float = 1.0, z=None) -> "SurfaceGrid":
        """Regular lattice centred on the origin, optionally with heights."""
        xs = (np.arange(width) - (width - 1) / 2.0) * pitch
        ys = (np.arange(height) - (height - 1) / 2.0) * pitch
        xx, yy = np.meshgrid(xs, ys)
        zz = np.zeros_like(xx) if z is None else np.broadcast_to(z, xx.shape)
        return cls(np.stack([xx, yy, zz], axis=-1), pitch)


@dataclass(frozen=True, eq=False)
class _ScalarGrid:
    values: np.ndarray
    _dtype = np.float32

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise GridError(f"values must be a non-empty 2D array, got shape {v.shape}")
        object.__setattr__(self, "values", _frozen(v, self._dtype))
        self._check()

    def _check(self):
        pass

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class ResidualGrid(_ScalarGrid):
    """Signed z-distance (mm) of every grid point from a fitted base surface."""

    def _check(self):
        if not np.all(np.isfinite(self.values)):
            raise GridError(f"non-finite residuals at {validate_finite(self.values)[:5]}")


class LabelMask(_ScalarGrid):
    """Binary labels, 1 = dented."""

    _dtype = np.uint8

    def _check(self):
        if self.values.max(initial=0) > 1:
            raise GridError("label mask values must be 0 or 1")

    @property
    def positives(self) -> int:
        return int(self.values.sum(dtype=np.int64))


class ProbMask(_ScalarGrid):
    """Per-cell dent probability in [0, 1]."""

    def _check(self):
        v = self.values
        if not (np.all(np.isfinite(v)) and v.min() >= 0.0 and v.max() <= 1.0):
            raise GridError("probabilities must lie in [0, 1]")

    def threshold(self, t: float) -> LabelMask:
        # t = 0 selects everything, t = 1 selects nothing
        if t <= 0.0:
            return LabelMask(np.ones(self.shape, np.uint8))
        return LabelMask((self.values >= t) & (t < 1.0))


Gridlike = SurfaceGrid | ResidualGrid | LabelMask | ProbMask


def _array_of(g) -> np.ndarray:
    return g.points if isinstance(g, SurfaceGrid) else g.values


def _rebuild(g, arr: np.ndarray):
    if isinstance(g, SurfaceGrid):
        return SurfaceGrid(arr, g.pitch)
    return type(g)(arr)


def crop(g, origin: tuple[int, int], size: tuple[int, int]):
    """Exact ``size = (w, h)`` sub-window whose top-left cell is ``origin = (col, row)``."""
    col, row = origin
    w, h = size
    if w < 1 or h < 1:
        raise GridError(f"crop size must be positive, got {size}")
    if col < 0 or row < 0 or col + w > g.width or row + h > g.height:
        raise GridError(
            f"crop window origin={origin} size={size} exceeds grid "
            f"{g.width}x{g.height} (w x h)"
        )
    return _rebuild(g, _array_of(g)[row:row + h, col:col + w])


def flip(g, axis: str):
    """Mirror a grid. ``horizontal`` reverses each row, ``vertical`` reverses row order."""
    a = _array_of(g)
    if axis == "horizontal":
        out = a[:, ::-1]
    elif axis == "vertical":
        out = a[::-1, :]
    else:
        raise GridError(f"unknown flip axis {axis!r}")
    return _rebuild(g, out)


def validate_finite(g) -> list[tuple[int, int]]:
    """``(col, row)`` of every cell holding NaN or Inf; empty when the grid is clean."""
    a = g if isinstance(g, np.ndarray) else _array_of(g)
    a = np.asarray(a)
    bad = ~np.isfinite(a)
    if bad.ndim == 3:
        bad = bad.any(axis=2)
    rows, cols = np.nonzero(bad)
    return [(int(c), int(r)) for r, c in zip(rows, cols)]
