"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (also repeated in the
terminal summary) before asserting. The training criteria are marked slow.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dentseg.autograd import Tensor, gradcheck
from dentseg.autograd import functional as F
from dentseg.dataio import write_dataset
from dentseg.grid import SurfaceGrid
from dentseg.metrics import (ConfusionMatrix, all_positive_iou, bench, best_threshold_baseline,
                             metrics_from_confusion, score_dataset)
from dentseg.net import NetConfig, build, iou, predict_proba, train, train_step
from dentseg.autograd import Adam
from dentseg.noisebank import synthetic_bank
from dentseg.pipeline import split, synthetic_arrays
from dentseg.preprocess import QuadricCoeffs, alignment_rotation, canonicalize, fit_plane, fit_quadric
from dentseg.synth import DentSpec, SynthConfig, bump, dent_field, generate_dataset, rotation_matrix

Z = np.array([0.0, 0.0, 1.0])


def verdict(number: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_c01_metric_reproduction():
    a = metrics_from_confusion(ConfusionMatrix(tp=11.49, fp=0.62, fn=0.29, tn=87.60))
    b = metrics_from_confusion(ConfusionMatrix(tp=10.82, fp=1.29, fn=0.66, tn=87.24))
    checks = [
        (a.iou, 92.66, 0.05), (a.precision, 94.88, 0.05), (a.recall, 97.54, 0.05),
        (b.iou, 84.76, 0.1), (b.precision, 89.35, 0.1), (b.recall, 94.25, 0.1),
        (b.accuracy, 98.05, 0.1),
    ]
    worst = max(abs(100 * got - want) / tol for got, want, tol in checks)
    ok = worst <= 1.0 and abs(100 * b.iou - 84.7) <= 0.1
    verdict(1, "metric reproduction", ok,
            f"IoU {100 * a.iou:.2f}/{100 * b.iou:.2f}, precision {100 * a.precision:.2f}/"
            f"{100 * b.precision:.2f}, recall {100 * a.recall:.2f}/{100 * b.recall:.2f}, "
            f"accuracy {100 * b.accuracy:.2f} (worst at {worst:.2f} of tolerance)")


# 2 ---------------------------------------------------------------------------

def test_c02_quadric_exactness():
    rng = np.random.default_rng(20)
    lattice = SurfaceGrid.lattice(160, 96, 3.125)
    worst, slowest = 0.0, 0.0
    for _ in range(50):
        # magnitudes spread over decades, kept away from zero so a relative bound is meaningful
        mag = np.array([10.0, 1e-1, 1e-1, 1e-3, 1e-3, 1e-3]) * 10 ** rng.uniform(-2, 0, 6)
        c = rng.choice([-1.0, 1.0], 6) * mag
        g = lattice.with_z(QuadricCoeffs(*c)(lattice.x, lattice.y))
        t0 = time.perf_counter()
        got = fit_quadric(g).as_array()
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, float(np.max(np.abs(got - c) / np.abs(c))))
    verdict(2, "quadric-fit exactness", worst <= 1e-9 and slowest < 0.1,
            f"50 random quadrics on 160x96, worst relative error {worst:.1e}, "
            f"slowest fit {1000 * slowest:.1f} ms")


# 3 ---------------------------------------------------------------------------

def test_c03_rotation_contract():
    rng = np.random.default_rng(30)
    v = rng.normal(size=(1000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[v[:, 2] < 0] *= -1
    map_err = orth_err = 0.0
    for n in v:
        r = alignment_rotation(n)
        map_err = max(map_err, float(np.linalg.norm(r @ Z - n)))
        orth_err = max(orth_err, float(np.linalg.norm(r.T @ r - np.eye(3))))
    align_err = 0.0
    base = SurfaceGrid.lattice(160, 96, 3.125)
    base = base.with_z(2e-4 * base.x**2 - 1e-4 * base.y**2)
    for _ in range(20):
        tilted = base.transformed(rotation_matrix(rng.uniform(-15, 15, 3)))
        canon, _ = canonicalize(tilted)
        align_err = max(align_err, float(np.linalg.norm(fit_plane(canon).normal - Z)))
    ok = map_err <= 1e-9 and orth_err <= 1e-9 and align_err <= 1e-9
    verdict(3, "rotation contract", ok,
            f"max |R z - n| {map_err:.1e}, max |R'R - I| {orth_err:.1e}, "
            f"canonical normal error {align_err:.1e}")


# 4 ---------------------------------------------------------------------------

def _layer_cases(rng):
    """(name, fn, inputs) with random float32 shapes no larger than 2x8x16x16."""
    def t(*shape, scale=1.0):
        return Tensor((rng.normal(size=shape) * scale).astype(np.float32), requires_grad=True)

    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 9))
    co = int(rng.integers(1, 9))
    h = 2 * int(rng.integers(2, 9))
    w = 2 * int(rng.integers(2, 9))
    x = t(n, c, h, w)
    cases = []
    for s in (1, 2):
        cases.append((f"conv2d s{s}", lambda x, k, b, s=s: F.conv2d(x, k, b, s, 1),
                      [x, t(co, c, 3, 3), t(co)]))
    xs = t(n, c, h // 2, w // 2)
    cases.append(("conv_transpose2d", lambda x, k, b: F.conv_transpose2d(x, k, b),
                  [xs, t(c, co, 3, 3), t(co)]))
    gamma = Tensor(rng.uniform(0.5, 1.5, c).astype(np.float32), requires_grad=True)
    cases.append(("batch_norm", lambda x, g, b: F.batch_norm(x, g, b), [x, gamma, t(c)]))
    # relu sampled away from its kink by more than the finite-difference step
    xr = Tensor((np.sign(rng.normal(size=(n, c, h, w))) * rng.uniform(0.05, 1.0, (n, c, h, w)))
                .astype(np.float32), requires_grad=True)
    cases.append(("relu", F.relu, [xr]))
    cases.append(("sigmoid", F.sigmoid, [x]))
    cases.append(("concat", F.concat_channels, [x, t(n, co, h, w)]))
    target = (rng.random((n, 1, h, w)) < 0.3).astype(np.float32)
    pw = float(rng.uniform(1, 10))
    cases.append(("weighted BCE", lambda z: F.weighted_bce(F.sigmoid(z), target, pw), [t(n, 1, h, w)]))
    p = Tensor(rng.uniform(0.1, 0.9, (n, 1, h, w)).astype(np.float32), requires_grad=True)
    cases.append(("weighted BCE (prob)", lambda p: F.weighted_bce(p, target, pw), [p]))
    return cases


def test_c04_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(40)
    worst: dict[str, float] = {}
    for trial in range(6):
        for name, fn, inputs in _layer_cases(rng):
            # probability-space BCE is strongly curved; a smaller step keeps truncation error down
            eps = 1e-3 if name == "weighted BCE (prob)" else None
            err = gradcheck(fn, inputs, eps=eps, seed=trial).max_rel_error
            worst[name] = max(worst.get(name, 0.0), err)
    layers_ok = max(worst.values()) < 1e-3

    # whole network, float64 so that finite differences resolve deep-layer gradients
    net = build(NetConfig(stem=4, seed=1))
    net.head.weight.data = rng.normal(size=net.head.weight.shape)
    for p in net.parameters():
        p.data = p.data.astype(np.float64)
    x = rng.normal(size=(2, 1, 32, 32))
    y = (rng.random((2, 1, 32, 32)) < 0.3).astype(np.float64)
    spots = [net.enc[0].conv.weight, net.skip[1].weight, net.down[2].conv.weight,
             net.bottom.bn.weight, net.up[3].conv.weight, net.dec[0].conv.bias, net.head.weight]
    net_err = gradcheck(lambda *_: F.weighted_bce(net(x), y, 3.0), spots, eps=1e-6,
                        max_checks=6).max_rel_error
    seconds = time.perf_counter() - t0
    ok = layers_ok and net_err < 1e-2 and seconds < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(4, "gradient suite", ok,
            f"float32 layer errors [{detail}]; full-network {net_err:.1e}; {seconds:.0f} s")


# 5 and 6 share generated data ------------------------------------------------

@pytest.fixture(scope="module")
def desk_data():
    t0 = time.perf_counter()
    x, y = synthetic_arrays(SynthConfig(), 2000, seed=1)
    return x, y, time.perf_counter() - t0


@pytest.mark.slow
def test_c05_desk_scale_training(desk_data):
    x, y, gen_seconds = desk_data
    (tx, ty), (vx, vy) = split(x, y, 0.8)
    t0 = time.perf_counter()
    net = build(NetConfig(stem=16, epochs=3, batch_size=8, lr=1e-3, seed=0))
    report = train(net, (tx, ty), (vx, vy))
    train_seconds = time.perf_counter() - t0
    metrics, _ = score_dataset(lambda xs: list(predict_proba(net, np.stack(xs)) >= 0.5), zip(vx, vy))
    all_pos = all_positive_iou(vy)
    thr, cut = best_threshold_baseline(vx, vy)
    total = gen_seconds + train_seconds
    ok = metrics.iou >= 0.70 and metrics.iou > all_pos and metrics.iou > thr and total < 30 * 60
    verdict(5, "desk-scale training", ok,
            f"val IoU {metrics.iou:.3f} (per epoch {np.round(report.val_ious, 3).tolist()}), "
            f"all-positive {all_pos:.3f}, best threshold {thr:.3f} at {cut:.2f} mm, "
            f"{len(tx)}/{len(vx)} samples, {total / 60:.1f} min")


@pytest.mark.slow
def test_c06_noise_mixing_effect():
    cfg = SynthConfig()
    train_bank = synthetic_bank(6, 240, 144, seed=101)
    held_out_bank = synthetic_bank(6, 240, 144, seed=202)
    vx, vy = synthetic_arrays(cfg, 300, seed=2, noise_bank=held_out_bank)
    scores = {}
    for name, bank in (("gaussian-only", None), ("noise-trained", train_bank)):
        x, y = synthetic_arrays(cfg, 800, seed=1, noise_bank=bank)
        net = build(NetConfig(stem=8, epochs=3, seed=0))
        train(net, *split(x, y, 0.8))
        scores[name] = iou(predict_proba(net, vx) >= 0.5, vy)
    gap = 100 * (scores["noise-trained"] - scores["gaussian-only"])
    verdict(6, "noise-mixing effect", gap >= 5.0,
            f"IoU on held-out-noise data: gaussian-only {scores['gaussian-only']:.3f}, "
            f"noise-trained {scores['noise-trained']:.3f}, gap {gap:.1f} points")


# 7 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c07_single_sample_overfit():
    cfg = SynthConfig()
    sample = next(s for s in generate_dataset(cfg, 50, seed=70) if s.truth.values.mean() > 0.03)
    x, y = synthetic_arrays(cfg, 1, seed=70, start=sample.provenance["index"])
    net = build(NetConfig(stem=16, seed=0))
    opt = Adam(net.parameters(), lr=3e-3)
    for _ in range(200):
        train_step(net, opt, x, y)
    score = iou(predict_proba(net, x) >= 0.5, y)
    verdict(7, "single-sample overfit", score >= 0.95,
            f"training IoU {score:.3f} after 200 steps ({100 * y.mean():.1f}% dented cells)")


# 8 ---------------------------------------------------------------------------

def test_c08_throughput():
    net = build(NetConfig())
    grid = next(generate_dataset(SynthConfig(), 1, seed=80)).surface
    rep = bench(net, grid, repetitions=7)
    stages = rep.stages
    ok = (rep.points_per_second >= 200_000 and set(stages) == {"preprocess", "inference"}
          and math.isclose(rep.points_per_second * rep.seconds, rep.points, rel_tol=1e-9))
    verdict(8, "throughput", ok,
            f"{rep.points_per_second:,.0f} points/s on {grid.width}x{grid.height} "
            f"(preprocess {1000 * stages['preprocess']:.1f} ms, "
            f"inference {1000 * stages['inference']:.1f} ms, median of {rep.repetitions})")


# 9 ---------------------------------------------------------------------------

def _pipeline_run(tmp_path, tag):
    cfg = SynthConfig(width=64, height=32, world_x=200.0, world_y=100.0)
    path = tmp_path / f"{tag}.dent"
    write_dataset(path, generate_dataset(cfg, 24, seed=9), world=(cfg.world_x, cfg.world_y))
    x, y = synthetic_arrays(cfg, 24, seed=9)
    net = build(NetConfig(stem=4, epochs=2, batch_size=4, seed=9))
    report = train(net, *split(x, y, 0.75))
    metrics, cm = score_dataset(net, zip(x, y))
    return path.read_bytes(), report.step_losses, [a.copy() for _, a in net.state()], metrics, cm


def test_c09_determinism(tmp_path):
    a = _pipeline_run(tmp_path, "a")
    b = _pipeline_run(tmp_path, "b")
    same_data = a[0] == b[0]
    same_traj = a[1] == b[1]
    same_params = all(np.array_equal(p, q) for p, q in zip(a[2], b[2]))
    same_metrics = a[3] == b[3] and a[4] == b[4]
    ok = same_data and same_traj and same_params and same_metrics
    verdict(9, "determinism", ok,
            f"dataset bytes {'identical' if same_data else 'differ'}, "
            f"{len(a[1])} step losses {'identical' if same_traj else 'differ'}, "
            f"parameters {'identical' if same_params else 'differ'}, "
            f"metrics {'identical' if same_metrics else 'differ'}")


# 10 --------------------------------------------------------------------------

def test_c10_dent_field_properties():
    centre = bump(0.0)
    r_out = np.concatenate([[1.0], np.linspace(1.0, 10.0, 1001)])
    outside = float(np.abs(bump(r_out)).max())
    d = DentSpec(0.0, 0.0, 40.0, 25.0, 3.0, 0.6)
    far = np.abs(dent_field(d, np.array([40.0 * math.cos(0.6), 100.0]),
                            np.array([40.0 * math.sin(0.6), 0.0]))).max()
    h = 1e-5
    slope = abs(float(bump(0.999 + h) - bump(0.999 - h)) / (2 * h))
    peak = abs(centre)
    ok = centre == -math.exp(-1.0) and outside == 0.0 and far == 0.0 and slope < 1e-2 * peak
    verdict(10, "dent-field properties", ok,
            f"z(0) = {centre!r}, max |z| for r >= 1 = {outside}, "
            f"|dz/dr| at r = 0.999 = {slope:.1e} (bound {1e-2 * peak:.1e})")
