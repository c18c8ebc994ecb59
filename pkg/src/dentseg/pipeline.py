"""Glue between the generator, preprocessing and the network."""
from __future__ import annotations

import numpy as np

from .preprocess import preprocess
from .synth import SynthConfig, generate_dataset


def residual_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess labelled samples into stacked (N, H, W) residuals and masks."""
    xs, ys = [], []
    for s in samples:
        surface, truth = (s.surface, s.truth) if hasattr(s, "surface") else s
        xs.append(preprocess(surface).residuals.values)
        ys.append(truth.values)
    return np.stack(xs), np.stack(ys)


def synthetic_arrays(config: SynthConfig, count: int, seed: int, noise_bank=None,
                     start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    return residual_arrays(generate_dataset(config, count, seed, noise_bank, start))


def split(x: np.ndarray, y: np.ndarray, train_fraction: float = 0.8):
    """Deterministic head/tail split (samples are already i.i.d. by construction)."""
    n = int(round(len(x) * train_fraction))
    return (x[:n], y[:n]), (x[n:], y[n:])
