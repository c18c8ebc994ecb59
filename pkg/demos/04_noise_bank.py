"""
Replaying scanner noise
=======================

Real scanners add structured errors that white noise does not capture. A
noise bank stores residual maps of flat boards; random crops and flips of
those maps are added to synthetic scans. Here the flat boards are
themselves synthetic: tilted planes carrying fringe ripple and blotches.
"""
from pathlib import Path

import numpy as np

from dentseg.dataio import read_noise_bank, write_noise_bank, write_overlay
from dentseg.noisebank import ingest_flat_scan, sample_patch, synthetic_flat_scan
from dentseg.noisebank import NoiseBank
from dentseg.preprocess import preprocess
from dentseg.synth import SynthConfig, generate_dataset

OUT = Path(__file__).with_name("output")
OUT.mkdir(exist_ok=True)
rng = np.random.default_rng(5)

# Ingesting a flat scan removes its best-fit plane, whatever its tilt.
maps = []
for i in range(4):
    board = synthetic_flat_scan(240, 144, rng, tilt_deg=8.0)
    maps.append(ingest_flat_scan(board, f"board-{i}"))
    v = maps[-1].residuals.values
    print(f"board {i}: residual rms {v.std():.3f} mm, range [{v.min():.2f}, {v.max():.2f}] mm")
bank = NoiseBank(tuple(maps))

path = OUT / "bank.dent"
write_noise_bank(path, bank)
bank = read_noise_bank(path)
print(f"bank of {len(bank)} maps stored in {path.name}")

# Patches are exact sub-windows of one map, possibly mirrored.
patch = sample_patch(bank, 160, 96, rng)
print("patch", patch.shape, "rms %.3f mm" % patch.values.std())

# Mix the bank into generated scans and compare residual images.
cfg = SynthConfig()
clean = next(generate_dataset(cfg, 1, seed=9))
noisy = next(generate_dataset(cfg, 1, seed=9, noise_bank=bank))
for name, s in (("white noise only", clean), ("with replayed noise", noisy)):
    r = preprocess(s.surface).residuals
    outside = r.values[s.truth.values == 0]
    print(f"{name:20s}: residual rms outside dents {outside.std():.3f} mm")
    write_overlay(r, s.truth, OUT / f"noise_{name.split()[0]}.png", scale=4)
print("overlays written to", OUT)
