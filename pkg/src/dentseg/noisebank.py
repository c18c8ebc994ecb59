"""Scanner noise replay: flat-board residual maps served as augmented patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import GridError, ResidualGrid, SurfaceGrid, crop, flip
from .preprocess import fit_plane


@dataclass(frozen=True, eq=False)
class NoiseMap:
    residuals: ResidualGrid
    source: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.residuals.shape


@dataclass(frozen=True, eq=False)
class NoiseBank:
    maps: tuple[NoiseMap, ...]
    flip_horizontal: bool = True
    flip_vertical: bool = True

    def __post_init__(self):
        object.__setattr__(self, "maps", tuple(self.maps))

    def __len__(self):
        return len(self.maps)


def ingest_flat_scan(cloud: SurfaceGrid, source: str = "") -> NoiseMap:
    """Residuals (along z) of a flat-board scan about its best-fit plane."""
    plane = fit_plane(cloud)
    res = cloud.z - plane.z_at(cloud.x, cloud.y)
    return NoiseMap(ResidualGrid(res), source)


def sample_patch(bank: NoiseBank, w: int, h: int, rng: np.random.Generator) -> ResidualGrid:
    """Random crop of a random large-enough map, with optional random flips."""
    fits = [m for m in bank.maps if m.shape[1] >= w and m.shape[0] >= h]
    if not fits:
        sizes = sorted({f"{m.shape[1]}x{m.shape[0]}" for m in bank.maps})
        raise GridError(f"no noise map can hold a {w}x{h} patch (available: {sizes})")
    m = fits[int(rng.integers(len(fits)))].residuals
    col = int(rng.integers(m.width - w + 1))
    row = int(rng.integers(m.height - h + 1))
    patch = crop(m, (col, row), (w, h))
    if bank.flip_horizontal and rng.random() < 0.5:
        patch = flip(patch, "horizontal")
    if bank.flip_vertical and rng.random() < 0.5:
        patch = flip(patch, "vertical")
    return patch


def structured_noise_field(width: int, height: int, rng: np.random.Generator,
                           fringe_amp=(0.25, 0.6), fringe_period=(6.0, 18.0),
                           blob_amp=(0.3, 0.8), blob_scale=(4.0, 10.0),
                           speckle=0.05) -> np.ndarray:
    """Spatially correlated, non-Gaussian stand-in for a fringe-projection scanner's error.

    Sum of a slightly tilted sinusoidal fringe ripple, smoothed low-frequency
    undulation and fine speckle. Amplitudes in mm, periods/scales in pixels.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ang = rng.uniform(-0.3, 0.3)
    period = rng.uniform(*fringe_period)
    phase = 2 * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) / period + rng.uniform(0, 2 * np.pi)
    # phase error wanders slowly across the field
    phase += ndimage.gaussian_filter(rng.normal(size=(height, width)), 12.0, mode="wrap") * 40.0
    field = rng.uniform(*fringe_amp) * np.sin(phase)
    blobs = ndimage.gaussian_filter(rng.normal(size=(height, width)), rng.uniform(*blob_scale), mode="wrap")
    blobs /= blobs.std() + 1e-12
    field += rng.uniform(*blob_amp) * blobs
    field += rng.normal(0.0, speckle, (height, width))
    return field


def synthetic_flat_scan(width: int, height: int, rng: np.random.Generator, pitch: float = 0.5,
                        tilt_deg: float = 5.0, **noise_kw) -> SurfaceGrid:
    """Tilted flat board carrying a structured noise field along its normal."""
    g = SurfaceGrid.lattice(width, height, pitch)
    z = g.z + structured_noise_field(width, height, rng, **noise_kw)
    from .synth import rotation_matrix

    angles = rng.uniform(-tilt_deg, tilt_deg, 3)
    return g.with_z(z).transformed(rotation_matrix(angles))


def synthetic_bank(n_maps: int, width: int, height: int, seed: int, **kw) -> NoiseBank:
    """Bank ingested from ``n_maps`` synthetic flat-board scans."""
    rng = np.random.default_rng(seed)
    maps = [ingest_flat_scan(synthetic_flat_scan(width, height, rng, **kw), f"synthetic-{seed}-{i}")
            for i in range(n_maps)]
    return NoiseBank(tuple(maps))
