"""Virtual dataset of dented curved panels with exact per-point labels."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .grid import GridError, LabelMask, ResidualGrid, SurfaceGrid


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Lengths in mm, angles in degrees.

    The defaults are the desk-scale setup (160 x 96 points over 500 x 300 mm);
    :meth:`full_scale` gives the full 960 x 640 setup.
    """

    world_x: float = 500.0
    world_y: float = 300.0
    width: int = 160
    height: int = 96
    dent_prob: float = 0.8
    dent_decay: float = 0.5
    max_dents: int = 12
    noise_sigma: float = 0.333
    xy_jitter: float = 0.25  # fraction of pitch, uniform +-
    rotation_limits: tuple[float, float, float] = (15.0, 15.0, 15.0)
    max_curvature: float = 5e-4  # 1/mm
    dent_length: tuple[float, float] = (20.0, 150.0)  # full extents along the dent axes
    dent_width: tuple[float, float] = (20.0, 150.0)
    dent_depth: tuple[float, float] = (0.5, 5.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dent_prob <= 1.0:
            raise ValueError("dent_prob must be in [0, 1]")
        if not 0.0 <= self.dent_decay < 1.0:
            raise ValueError("dent_decay must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.width % 16 or self.height % 16 or self.width < 16 or self.height < 16:
            raise ValueError(f"grid {self.width}x{self.height} must be multiples of 16")
        object.__setattr__(self, "rotation_limits", tuple(float(a) for a in self.rotation_limits))
        for name in ("dent_length", "dent_width", "dent_depth"):
            object.__setattr__(self, name, tuple(float(a) for a in getattr(self, name)))

    @property
    def pitch_x(self) -> float:
        return self.world_x / self.width

    @property
    def pitch_y(self) -> float:
        return self.world_y / self.height

    @classmethod
    def full_scale(cls, **kw) -> "SynthConfig":
        kw = {"world_x": 500.0, "world_y": 330.0, "width": 960, "height": 640,
              "noise_sigma": 2.0, **kw}
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BaseSurfaceParams:
    alpha: float = 0.0
    beta: float = 0.0

    @classmethod
    def draw(cls, config: SynthConfig, rng: np.random.Generator) -> "BaseSurfaceParams":
        k = config.max_curvature
        return cls(float(rng.uniform(-k, k)), float(rng.uniform(-k, k)))


@dataclass(frozen=True)
class DentSpec:
    cx: float
    cy: float
    scale_x: float  # half-extent along the dent's local x axis
    scale_y: float
    depth: float  # peak deformation, applied downwards
    theta: float = 0.0  # radians

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0 or self.depth <= 0:
            raise ValueError("dent scales and depth must be positive")

    def radius(self, x, y):
        """Normalised elliptic radius of (x, y) in the dent frame; support is r < 1."""
        dx = np.asarray(x) - self.cx
        dy = np.asarray(y) - self.cy
        ct, st = math.cos(self.theta), math.sin(self.theta)
        u = (ct * dx + st * dy) / self.scale_x
        v = (-st * dx + ct * dy) / self.scale_y
        return np.sqrt(u * u + v * v)


# Sample dimensions (length, width, depth) in mm of the four printed test tiles.
DENT_SAMPLES = {
    "A": (60.0, 40.0, 2.0),
    "B": (120.0, 100.0, 2.0),
    "C": (100.0, 80.0, 3.0),
    "D": (120.0, 80.0, 1.0),
}


def preset_dent(name: str, cx: float = 0.0, cy: float = 0.0, theta: float = 0.0) -> DentSpec:
    length, width, depth = DENT_SAMPLES[name]
    return DentSpec(cx, cy, length / 2, width / 2, depth, theta)


def bump(r):
    """Unit dent profile: ``-exp(-1 / (1 - r^2))`` inside the unit disc, 0 outside."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros(r.shape)
    inside = np.abs(r) < 1.0
    ri = r[inside]
    out[inside] = -np.exp(-1.0 / (1.0 - ri * ri))
    return out if out.ndim else float(out)


def dent_field(spec: DentSpec, x, y):
    """z-deformation of one dent, scaled so the deepest point sits at ``-spec.depth``."""
    return spec.depth * math.e * bump(spec.radius(x, y))


def parabola(params: BaseSurfaceParams, x, y):
    return params.alpha * np.asarray(x) ** 2 + params.beta * np.asarray(y) ** 2


def base_surface(params: BaseSurfaceParams, config: SynthConfig, rng: np.random.Generator,
                 jitter: bool = True) -> SurfaceGrid:
    """Parabolic panel over a jittered lattice centred on the origin."""
    w, h = config.width, config.height
    px, py = config.pitch_x, config.pitch_y
    xs = (np.arange(w) - (w - 1) / 2.0) * px
    ys = (np.arange(h) - (h - 1) / 2.0) * py
    xx, yy = np.meshgrid(xs, ys)
    if jitter and config.xy_jitter > 0:
        a = config.xy_jitter
        xx = xx + rng.uniform(-a, a, xx.shape) * px
        yy = yy + rng.uniform(-a, a, yy.shape) * py
    zz = parabola(params, xx, yy)
    return SurfaceGrid(np.stack([xx, yy, zz], axis=-1), (px + py) / 2)


def draw_dent(config: SynthConfig, rng: np.random.Generator) -> DentSpec:
    length = rng.uniform(*config.dent_length)
    width = rng.uniform(*config.dent_width)
    return DentSpec(
        cx=float(rng.uniform(-config.world_x / 2, config.world_x / 2)),
        cy=float(rng.uniform(-config.world_y / 2, config.world_y / 2)),
        scale_x=float(length / 2),
        scale_y=float(width / 2),
        depth=float(rng.uniform(*config.dent_depth)),
        theta=float(rng.uniform(0.0, math.pi)),
    )


def spawn_dents(config: SynthConfig, rng: np.random.Generator) -> list[DentSpec]:
    """First dent with probability p, the (k+1)-th with probability p * q**k."""
    dents = []
    prob = config.dent_prob
    while len(dents) < config.max_dents and rng.random() < prob:
        dents.append(draw_dent(config, rng))
        prob = config.dent_prob * config.dent_decay ** len(dents)
    return dents


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rz @ Ry @ Rx for angles (about x, about y, about z) in degrees."""
    ax, ay, az = np.radians(np.asarray(angles_deg, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True, eq=False)
class LabelledSample:
    surface: SurfaceGrid
    truth: LabelMask
    provenance: dict = field(default_factory=dict)


def rotate_sample(sample: LabelledSample, rng: np.random.Generator | None = None,
                  angles=None, limits=(15.0, 15.0, 15.0)) -> LabelledSample:
    """Rigidly rotate every point; labels travel with their points."""
    if angles is None:
        lim = np.asarray(limits, dtype=np.float64)
        angles = rng.uniform(-lim, lim) if rng is not None else np.zeros(3)
    angles = np.asarray(angles, dtype=np.float64)
    r = rotation_matrix(angles)
    prov = dict(sample.provenance)
    prov["rotation_deg"] = tuple(float(a) for a in angles)
    prov["rotation"] = r
    return LabelledSample(sample.surface.transformed(r), sample.truth, prov)


def compose_sample(base: SurfaceGrid, dents: list[DentSpec], config: SynthConfig,
                   rng: np.random.Generator, noise_patch: ResidualGrid | None = None,
                   rotate: bool = True) -> LabelledSample:
    """Add dents, white noise and an optional replayed noise patch, then rotate."""
    if noise_patch is not None and noise_patch.shape != base.shape:
        raise GridError(f"noise patch {noise_patch.shape} does not match grid {base.shape}")
    x, y = base.x, base.y
    deepest = np.zeros(base.shape)
    mask = np.zeros(base.shape, dtype=bool)
    for d in dents:
        r = d.radius(x, y)
        mask |= r < 1.0
        deepest = np.minimum(deepest, d.depth * math.e * bump(r))
    z = base.z + deepest
    if config.noise_sigma > 0:
        z = z + rng.normal(0.0, config.noise_sigma, base.shape)
    if noise_patch is not None:
        z = z + noise_patch.values.astype(np.float64)
    sample = LabelledSample(base.with_z(z), LabelMask(mask), {"dents": list(dents)})
    if rotate:
        return rotate_sample(sample, rng, limits=config.rotation_limits)
    return sample


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_sample(config: SynthConfig, seed: int, index: int, noise_bank=None) -> LabelledSample:
    rng = sample_rng(seed, index)
    params = BaseSurfaceParams.draw(config, rng)
    base = base_surface(params, config, rng)
    dents = spawn_dents(config, rng)
    patch = None
    if noise_bank is not None:
        from .noisebank import sample_patch

        patch = sample_patch(noise_bank, config.width, config.height, rng)
    s = compose_sample(base, dents, config, rng, patch)
    s.provenance.update(seed=seed, index=index, alpha=params.alpha, beta=params.beta)
    return s


def generate_dataset(config: SynthConfig, count: int, seed: int | None = None,
                     noise_bank=None, start: int = 0) -> Iterator[LabelledSample]:
    """Stream ``count`` samples; sample i depends only on (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    seed = config.seed if seed is None else seed
    for i in range(start, start + count):
        yield generate_sample(config, seed, i, noise_bank)

