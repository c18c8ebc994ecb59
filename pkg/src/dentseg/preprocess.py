"""Reduction of a 3D scan grid to the 2D residual image fed to the network.

Three steps: rotate the surface so its average normal is the z axis, fit a
bivariate quadric z(x, y), and keep the z-distance of every point from it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ResidualGrid, SurfaceGrid

Z_AXIS = np.array([0.0, 0.0, 1.0])


class FitError(ValueError):
    """The points do not determine the requested model."""


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray  # unit, n . z > 0
    offset: float  # plane is {p : n . p = offset}
    centroid: np.ndarray

    def z_at(self, x, y):
        n = self.normal
        return (self.offset - n[0] * x - n[1] * y) / n[2]


@dataclass(frozen=True)
class QuadricCoeffs:
    """z(x, y) = a + b x + c y + d x^2 + e x y + f y^2"""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f])

    def __call__(self, x, y):
        return self.a + self.b * x + self.c * y + self.d * x * x + self.e * x * y + self.f * y * y


@dataclass(frozen=True, eq=False)
class Preprocessed:
    residuals: ResidualGrid
    rotation: np.ndarray  # applied to points as p' = R.T @ p
    quadric: QuadricCoeffs
    shape: tuple[int, int]  # (h, w) of the source grid

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation


def _points(grid) -> np.ndarray:
    if isinstance(grid, SurfaceGrid):
        return grid.flat()
    return np.asarray(grid, dtype=np.float64).reshape(-1, 3)


def fit_plane(grid) -> PlaneFit:
    """Total-least-squares plane through a grid (or an ``(n, 3)`` array)."""
    p = _points(grid)
    if len(p) < 3:
        raise FitError(f"plane fit needs at least 3 points, got {len(p)}")
    centroid = p.mean(axis=0)
    q = p - centroid
    cov = q.T @ q / len(p)
    evals, evecs = np.linalg.eigh(cov)
    # two vanishing directions -> collinear or coincident points
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise FitError("points are collinear; plane is undetermined")
    n = evecs[:, 0]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return PlaneFit(n, float(n @ centroid), centroid)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def alignment_rotation(normal) -> np.ndarray:
    """Rotation taking the z axis onto ``normal`` (Rodrigues form without trig)."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    c = float(Z_AXIS @ n)
    if c <= -1.0 + 1e-6:
        raise FitError("normal is antiparallel to z; rotation is undefined")
    k = _skew(np.cross(Z_AXIS, n))
    return np.eye(3) + k + (k @ k) / (1.0 + c)


def canonicalize(grid: SurfaceGrid) -> tuple[SurfaceGrid, np.ndarray]:
    """Rotate ``grid`` so its fitted plane normal becomes z. Returns the grid and R."""
    r = alignment_rotation(fit_plane(grid).normal)
    # R maps z to n, so R.T maps n to z; row-vector form p @ R == (R.T p)
    return SurfaceGrid(grid.points @ r, grid.pitch), r


def _design(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=1)


def fit_quadric(grid) -> QuadricCoeffs:
    """Least-squares quadric z(x, y) over all points.

    x and y are shifted to their centroid and scaled to unit RMS before the
    normal equations are formed; the result is mapped back to world units.
    """
    p = _points(grid)
    if len(p) < 6:
        raise FitError(f"quadric fit needs at least 6 points, got {len(p)}")
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    mx, my = x.mean(), y.mean()
    s = np.sqrt(((x - mx) ** 2 + (y - my) ** 2).mean() / 2.0)
    if not s > 0:
        raise FitError("all points share one xy location")
    u, v = (x - mx) / s, (y - my) / s
    a = _design(u, v)
    # column scaling keeps the Gram matrix near unit diagonal
    col = np.sqrt((a * a).mean(axis=0))
    a = a / col
    gram = a.T @ a
    rhs = a.T @ z
    if np.linalg.cond(gram) > 1e12:
        raise FitError("quadric design matrix is rank deficient")
    k = np.linalg.solve(gram, rhs)
    # one refinement pass on the float64 residual recovers digits lost to large |z|
    k += np.linalg.solve(gram, a.T @ (z - a @ k))
    k /= col
    A, B, C, D, E, F = k
    # expand A + B u + C v + D u^2 + E u v + F v^2 with u = (x - mx)/s, v = (y - my)/s
    d = D / s**2
    e = E / s**2
    f = F / s**2
    b = B / s - 2 * d * mx - e * my
    c = C / s - 2 * f * my - e * mx
    a0 = A - B * mx / s - C * my / s + d * mx * mx + e * mx * my + f * my * my
    return QuadricCoeffs(*(float(t) for t in (a0, b, c, d, e, f)))


def residuals(grid: SurfaceGrid, coeffs: QuadricCoeffs) -> ResidualGrid:
    """Per-cell ``z - quadric(x, y)``; positive means above the fitted surface."""
    return ResidualGrid(grid.z - coeffs(grid.x, grid.y))


def preprocess(grid: SurfaceGrid) -> Preprocessed:
    canon, r = canonicalize(grid)
    q = fit_quadric(canon)
    return Preprocessed(residuals(canon, q), r, q, grid.shape)
