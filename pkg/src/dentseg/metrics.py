"""Confusion-matrix metrics, dataset scoring and throughput measurement."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import LabelMask, SurfaceGrid


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: float
    fp: float
    fn: float
    tn: float

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> float:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def fractions(self) -> "ConfusionMatrix":
        t = self.total
        return ConfusionMatrix(self.tp / t, self.fp / t, self.fn / t, self.tn / t)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Metrics:
    """Ratios in [0, 1]; a ratio with a zero denominator is NaN and listed in ``undefined``."""

    iou: float
    precision: float
    recall: float
    accuracy: float
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def confusion(pred, truth) -> ConfusionMatrix:
    """Cell counts with positive = dented."""
    p = np.asarray(pred.values if isinstance(pred, LabelMask) else pred).astype(bool)
    t = np.asarray(truth.values if isinstance(truth, LabelMask) else truth).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionMatrix(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return math.nan
    return num / den


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    undef: list[str] = []
    iou = _ratio(cm.tp, cm.tp + cm.fp + cm.fn, "iou", undef)
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", undef)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", undef)
    accuracy = _ratio(cm.tp + cm.tn, cm.total, "accuracy", undef)
    return Metrics(iou, precision, recall, accuracy, tuple(undef))


def _pairs(stream):
    for item in stream:
        if hasattr(item, "truth") and hasattr(item, "surface"):
            yield item.surface, item.truth
        else:
            yield item


def score_dataset(predictor, stream, batch_size: int = 8) -> tuple[Metrics, ConfusionMatrix]:
    """Micro-averaged metrics: confusions of every sample are pooled, then ratios taken once.

    ``predictor`` is a :class:`~dentseg.net.SegmentationNet` or any callable
    mapping a list of inputs to a list of binary masks. Stream items are
    labelled samples or (input, truth) pairs; surface grids are preprocessed
    before a network sees them.
    """
    from .net import SegmentationNet, predict_proba
    from .preprocess import preprocess

    if isinstance(predictor, SegmentationNet):
        net = predictor

        def predictor(inputs):
            arrs = [preprocess(i).residuals.values if isinstance(i, SurfaceGrid)
                    else getattr(i, "values", i) for i in inputs]
            return list(predict_proba(net, np.stack(arrs)) >= net.config.threshold)

    total = None
    buf = []

    def flush():
        nonlocal total
        preds = predictor([b[0] for b in buf])
        for p, (_, t) in zip(preds, buf):
            cm = confusion(p, t)
            total = cm if total is None else total + cm
        buf.clear()

    for pair in _pairs(stream):
        buf.append(pair)
        if len(buf) == batch_size:
            flush()
    if buf:
        flush()
    if total is None:
        raise ValueError("cannot score an empty stream")
    return metrics_from_confusion(total), total


def all_positive_iou(truths) -> float:
    """IoU of the trivial predictor that marks every cell dented."""
    pos = tot = 0
    for t in truths:
        t = np.asarray(getattr(t, "values", t))
        pos += int(np.count_nonzero(t))
        tot += t.size
    return pos / tot


def best_threshold_baseline(residuals, truths, thresholds=None) -> tuple[float, float]:
    """Best IoU over fixed cut-offs ``residual < -t``; returns (iou, t).

    The cut-off is chosen on the very data it is scored on, so this is an
    optimistic baseline.
    """
    r = np.stack([np.asarray(getattr(a, "values", a)) for a in residuals]).ravel()
    y = np.stack([np.asarray(getattr(a, "values", a)) for a in truths]).ravel().astype(bool)
    if thresholds is None:
        thresholds = np.linspace(0.0, max(float(-r.min()), 1e-3), 400)
    best = (0.0, 0.0)
    for t in thresholds:
        p = r < -t
        inter = np.count_nonzero(p & y)
        union = np.count_nonzero(p | y)
        score = inter / union if union else 0.0
        if score > best[0]:
            best = (score, float(t))
    return best


@dataclass
class BenchReport:
    points: int
    seconds: float
    points_per_second: float
    stages: dict = field(default_factory=dict)  # stage -> median seconds
    repetitions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def bench(net, grid: SurfaceGrid, repetitions: int = 5) -> BenchReport:
    """Median wall time of preprocessing, inference and both together."""
    from .net import predict
    from .preprocess import preprocess

    if repetitions < 3:
        raise ValueError("bench needs at least 3 repetitions")
    pre_t, inf_t, tot_t = [], [], []
    predict(net, preprocess(grid))  # warm-up
    for _ in range(repetitions):
        t0 = time.perf_counter()
        pre = preprocess(grid)
        t1 = time.perf_counter()
        predict(net, pre)
        t2 = time.perf_counter()
        pre_t.append(t1 - t0)
        inf_t.append(t2 - t1)
        tot_t.append(t2 - t0)
    n = grid.width * grid.height
    total = statistics.median(tot_t)
    return BenchReport(n, total, n / total,
                       {"preprocess": statistics.median(pre_t), "inference": statistics.median(inf_t)},
                       repetitions)
