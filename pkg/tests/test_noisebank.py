from collections import Counter

import numpy as np
import pytest

from dentseg.grid import GridError, ResidualGrid, SurfaceGrid
from dentseg.noisebank import (NoiseBank, NoiseMap, ingest_flat_scan, sample_patch,
                               structured_noise_field, synthetic_bank, synthetic_flat_scan)
from dentseg.preprocess import FitError
from dentseg.synth import rotation_matrix


def plane(w=120, h=80, fn=lambda x, y: 2 + 0.01 * x):
    g = SurfaceGrid.lattice(w, h, 1.5)
    return g.with_z(fn(g.x, g.y))


def test_exact_plane_gives_zero_residuals():
    m = ingest_flat_scan(plane())
    assert np.abs(m.residuals.values).max() <= 1e-9


def test_spike_survives_plane_removal():
    g = plane()
    z = g.z.copy()
    z[40, 60] += 0.5
    m = ingest_flat_scan(g.with_z(z)).residuals.values
    # least-squares leverage of one point over 9600 is ~1e-4
    assert m[40, 60] == pytest.approx(0.5, abs=1e-3)
    others = np.delete(m.ravel(), 40 * 120 + 60)
    assert np.abs(others).max() <= 1e-3


def test_degenerate_scan_rejected():
    pts = np.zeros((1, 5, 3))
    pts[0, :, 0] = np.arange(5)
    with pytest.raises(FitError):
        ingest_flat_scan(SurfaceGrid(pts))


@pytest.mark.parametrize("angles", [(0, 0, 0), (20, -10, 45), (-25, 25, -90)])
def test_tilted_planes_ingest_flat(angles):
    g = plane(fn=lambda x, y: np.zeros_like(x)).transformed(rotation_matrix(angles))
    assert np.abs(ingest_flat_scan(g).residuals.values).max() <= 1e-6


def test_noise_map_mean_removed():
    m = ingest_flat_scan(synthetic_flat_scan(200, 120, np.random.default_rng(0)))
    assert abs(float(m.residuals.values.mean(dtype=np.float64))) <= 0.05


def test_patch_same_size_no_flips_is_verbatim():
    v = np.random.default_rng(1).normal(size=(16, 32))
    bank = NoiseBank((NoiseMap(ResidualGrid(v)),), flip_horizontal=False, flip_vertical=False)
    p = sample_patch(bank, 32, 16, np.random.default_rng(0))
    assert np.array_equal(p.values, v.astype(np.float32))


def test_patch_too_large_rejected():
    bank = NoiseBank((NoiseMap(ResidualGrid(np.zeros((900, 1800)))),))
    with pytest.raises(GridError, match="2000x2000"):
        sample_patch(bank, 2000, 2000, np.random.default_rng(0))


def test_patch_values_come_from_a_source_map():
    rng = np.random.default_rng(2)
    maps = tuple(NoiseMap(ResidualGrid(rng.normal(size=(40, 60)))) for _ in range(3))
    bank = NoiseBank(maps)
    sources = [Counter(m.residuals.values.ravel().tolist()) for m in maps]
    for _ in range(50):
        p = Counter(sample_patch(bank, 32, 16, rng).values.ravel().tolist())
        # multiset containment in at least one source map
        assert any(all(src[v] >= c for v, c in p.items()) for src in sources)


def test_patch_flips_both_ways():
    v = np.arange(16 * 32, dtype=np.float32).reshape(16, 32)
    bank = NoiseBank((NoiseMap(ResidualGrid(v)),))
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(40):
        p = sample_patch(bank, 32, 16, rng).values
        seen.add((p[0, 0] > p[0, -1], p[0, 0] > p[-1, 0]))
    assert len(seen) == 4


def test_structured_noise_is_correlated():
    f = structured_noise_field(160, 96, np.random.default_rng(0))
    lag1 = np.corrcoef(f[:, :-1].ravel(), f[:, 1:].ravel())[0, 1]
    assert lag1 > 0.5
    assert 0.1 < f.std() < 2.0


def test_synthetic_bank():
    bank = synthetic_bank(2, 200, 120, seed=3)
    assert len(bank) == 2
    p = sample_patch(bank, 160, 96, np.random.default_rng(0))
    assert p.shape == (96, 160)
