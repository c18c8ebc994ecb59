"""Encoder/decoder segmentation network, its training loop, inference and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autograd import Adam, Conv2d, ConvBNReLU, ConvTranspose2d, Module, Tensor, no_grad
from .autograd import functional as F
from .grid import LabelMask, ProbMask, ResidualGrid
from .preprocess import Preprocessed

log = logging.getLogger(__name__)

POS_WEIGHT_MAX = 100.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    levels: int = 4
    stem: int = 16
    in_channels: int = 1
    skip_fraction: float = 0.5
    threshold: float = 0.5
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.stem < 1:
            raise ValueError("levels and stem must be >= 1")

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    def channels(self, level: int) -> int:
        return self.stem * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class SegmentationNet(Module):
    """Fully convolutional encoder/decoder with 1x1-reduced skip connections.

    Encoder level k: Conv (stride 1) -> skip tap -> DownConv (stride 2,
    channels doubled). A stride-1 Conv sits at the bottom. Decoder level k:
    UpConv (channels halved) -> concat reduced skip -> Conv. Every
    convolution is followed by BN and ReLU; the head is a 1x1 convolution and
    a sigmoid.
    """

    def __init__(self, config: NetConfig = NetConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        L, ch = config.levels, config.channels
        self.enc, self.skip, self.down, self.up, self.dec = [], [], [], [], []
        cin = config.in_channels
        for k in range(L):
            c = ch(k)
            self.enc.append(ConvBNReLU(Conv2d(cin, c, 3, 1, 1, rng=rng), c))
            self.skip.append(Conv2d(c, self._reduced(c), 1, 1, 0, rng=rng))
            self.down.append(ConvBNReLU(Conv2d(c, 2 * c, 3, 2, 1, rng=rng), 2 * c))
            cin = 2 * c
        self.bottom = ConvBNReLU(Conv2d(ch(L), ch(L), 3, 1, 1, rng=rng), ch(L))
        for k in range(L):
            c = ch(k)
            self.up.append(ConvBNReLU(ConvTranspose2d(2 * c, c, 3, 2, 1, 1, rng=rng), c))
            self.dec.append(ConvBNReLU(Conv2d(c + self._reduced(c), c, 3, 1, 1, rng=rng), c))
        self.head = Conv2d(config.stem, 1, 1, 1, 0, rng=rng, init_std=1e-3)

    def _reduced(self, c: int) -> int:
        return max(1, int(round(c * self.config.skip_fraction)))

    def check_shape(self, h: int, w: int):
        m = self.config.multiple
        if h % m or w % m:
            raise ShapeError(f"input {w}x{h} (w x h) must have dimensions that are multiples of {m}")

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        self.check_shape(*x.shape[2:])
        taps = []
        for enc, skip, down in zip(self.enc, self.skip, self.down):
            x = enc(x)
            taps.append(skip(x))
            x = down(x)
        x = self.bottom(x)
        for k in reversed(range(self.config.levels)):
            x = self.up[k](x)
            x = self.dec[k](F.concat_channels(x, taps[k]))
        return F.sigmoid(self.head(x))

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter then every BN running statistic, in declaration order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_state(self, items: list[tuple[str, np.ndarray]]):
        own = dict(self.named_parameters())
        bufs = {n: b for n, b in self.named_buffers()}
        for name, arr in items:
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                raise KeyError(f"unknown buffer {name!r}")
            if target.shape != arr.shape:
                raise ShapeError(f"buffer {name!r}: shape {arr.shape} != {target.shape}")
            target[...] = arr


def build(config: NetConfig = NetConfig()) -> SegmentationNet:
    return SegmentationNet(config)


def estimate_pos_weight(masks) -> float:
    """Negative/positive cell ratio clamped to [1, 100] (100 when there are no positives)."""
    pos = tot = 0
    for m in masks:
        v = m.values if isinstance(m, LabelMask) else np.asarray(m)
        pos += int(np.count_nonzero(v))
        tot += v.size
    if tot == 0:
        raise ValueError("empty mask batch")
    if pos == 0:
        return POS_WEIGHT_MAX
    return float(min(max((tot - pos) / pos, 1.0), POS_WEIGHT_MAX))


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int
    pad_bottom: int
    pad_right: int

    def crop(self, a: np.ndarray) -> np.ndarray:
        return a[..., : self.height, : self.width]


def pad_to_multiple(values: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, CropRecord]:
    """Reflect-pad the trailing two axes up to the next multiple."""
    a = np.asarray(values)
    h, w = a.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    rec = CropRecord(h, w, ph, pw)
    if ph == 0 and pw == 0:
        return a, rec
    pad = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    # reflect needs pad < size; symmetric/edge cover degenerate tiny grids
    mode = "reflect" if ph < h and pw < w else "symmetric" if ph <= h and pw <= w else "edge"
    return np.pad(a, pad, mode=mode), rec


def pad_to_16(grid) -> tuple[np.ndarray, CropRecord]:
    v = grid.values if isinstance(grid, ResidualGrid) else grid
    return pad_to_multiple(v, 16)


def _residual_array(x) -> np.ndarray:
    if isinstance(x, Preprocessed):
        return x.residuals.values
    if isinstance(x, ResidualGrid):
        return x.values
    return np.asarray(x, dtype=np.float32)


def predict_proba(net: SegmentationNet, batch: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Probabilities for an (N, H, W) residual stack, padding as needed."""
    batch = np.asarray(batch, dtype=np.float32)
    padded, rec = pad_to_multiple(batch, net.config.multiple)
    net.eval()
    out = np.empty(padded.shape, dtype=np.float32)
    with no_grad():
        for i in range(0, len(padded), batch_size):
            out[i:i + batch_size] = net(padded[i:i + batch_size, None]).data[:, 0]
    return rec.crop(out)


def predict(net: SegmentationNet, pre, threshold: float | None = None) -> tuple[LabelMask, ProbMask]:
    """Segment one residual image; returns the binary mask and the probabilities."""
    t = net.config.threshold if threshold is None else threshold
    p = predict_proba(net, _residual_array(pre)[None])[0]
    probs = ProbMask(np.clip(p, 0.0, 1.0))
    return probs.threshold(t), probs


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    p, t = np.asarray(pred, bool), np.asarray(truth, bool)
    union = np.count_nonzero(p | t)
    return 1.0 if union == 0 else np.count_nonzero(p & t) / union


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    val_ious: list[float] = field(default_factory=list)
    best_iou: float = float("nan")
    best_epoch: int = -1
    seconds: float = 0.0
    best_state: list = field(default_factory=list, repr=False)


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        x, y = data
    else:
        xs, ys = [], []
        for inp, mask in data:
            xs.append(_residual_array(inp))
            ys.append(mask.values if isinstance(mask, LabelMask) else np.asarray(mask))
        if not xs:
            raise ValueError("empty data stream")
        shapes = {a.shape for a in xs} | {a.shape for a in ys}
        if len(shapes) != 1:
            raise ShapeError(f"inconsistent sample shapes in stream: {sorted(shapes)}")
        x, y = np.stack(xs), np.stack(ys)
    if len(x) == 0:
        raise ValueError("empty data stream")
    return np.asarray(x, np.float32), np.asarray(y, np.uint8)


def train_step(net: SegmentationNet, opt: Adam, x: np.ndarray, y: np.ndarray,
               pos_weight: float | None = None) -> float:
    net.train()
    w = estimate_pos_weight(y) if pos_weight is None else pos_weight
    opt.zero_grad()
    loss = F.weighted_bce(net(x[:, None]), y[:, None].astype(np.float32), w)
    loss.backward()
    opt.step()
    return loss.item()


def train(net: SegmentationNet, train_data, val_data=None, config: NetConfig | None = None,
          epochs: int | None = None, callback=None) -> TrainReport:
    """Weighted-BCE training; keeps the parameters with the best validation IoU.

    ``train_data`` / ``val_data`` are either ``(X, Y)`` arrays of shape
    (N, H, W) or iterables of (residuals, mask) pairs. The best state is
    loaded back into ``net`` before returning.
    """
    cfg = config or net.config
    x, y = _as_arrays(train_data)
    net.check_shape(*x.shape[1:])
    val = _as_arrays(val_data) if val_data is not None else None
    opt = Adam(net.parameters(), lr=cfg.lr)
    report = TrainReport()
    t0 = time.perf_counter()
    n_epochs = cfg.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            bx, by = x[idx], y[idx]
            if cfg.augment:
                if rng.random() < 0.5:
                    bx, by = bx[:, :, ::-1], by[:, :, ::-1]
                if rng.random() < 0.5:
                    bx, by = bx[:, ::-1], by[:, ::-1]
            losses.append(train_step(net, opt, np.ascontiguousarray(bx), np.ascontiguousarray(by)))
        report.step_losses.extend(losses)
        report.epoch_losses.append(float(np.mean(losses)))
        score = iou(predict_proba(net, val[0]) >= cfg.threshold, val[1]) if val else float("nan")
        report.val_ious.append(score)
        if val is None or not score <= report.best_iou:
            report.best_iou, report.best_epoch = score, epoch
            report.best_state = [(n, a.copy()) for n, a in net.state()]
        log.info("epoch %d loss %.4f val IoU %.4f (%.0fs)", epoch, report.epoch_losses[-1], score,
                 time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, report)
    if report.best_state:
        net.load_state(report.best_state)
    report.seconds = time.perf_counter() - t0
    return report


# -- checkpoints -------------------------------------------------------------

MAGIC = b"DNTK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def _encode(net: SegmentationNet, metadata: dict | None) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps({"net": net.config.to_dict(), "meta": metadata or {}}, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    state = net.state()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state:
        nb = name.encode()
        buf.write(struct.pack("<II", len(nb), arr.ndim) + nb)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save(net: SegmentationNet, path, metadata: dict | None = None):
    from .dataio import atomic_write

    atomic_write(path, _encode(net, metadata))


def _decode(raw: bytes) -> tuple[SegmentationNet, dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(raw) < 16:
        raise ChecksumError("checkpoint truncated")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
    (clen,) = struct.unpack_from("<I", body, 8)
    off = 12 + clen
    header = json.loads(body[12:off])
    net = SegmentationNet(NetConfig.from_dict(header["net"]))
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    items = []
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<II", body, off)
        off += 8
        name = body[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 4
        items.append((name, np.frombuffer(body, "<f4", size // 4, off).reshape(shape)))
        off += size
    net.load_state(items)
    return net, header.get("meta", {})


def load(path) -> SegmentationNet:
    with open(path, "rb") as f:
        return _decode(f.read())[0]


def load_with_metadata(path) -> tuple[SegmentationNet, dict]:
    with open(path, "rb") as f:
        return _decode(f.read())
