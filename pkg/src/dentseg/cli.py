"""Command-line front end: ``dentseg <command> [options]``.

Every command accepts ``--config FILE`` holding ``key = value`` lines. Keys
mirror the fields of :class:`~dentseg.synth.SynthConfig` and
:class:`~dentseg.net.NetConfig` plus a few run settings (see ``RUN_KEYS``);
each key is also a ``--flag`` and flags win over the file.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# run settings that are not part of either dataclass: name -> (type, default)
RUN_KEYS = {
    "count": (int, 2000),
    "val_fraction": (float, 0.2),
    "reps": (int, 5),
    "threads": (int, None),
    "noise_bank": (str, None),
    "checkpoint": (str, None),
    "out": (str, None),
}


class UsageError(Exception):
    """Bad invocation: unknown key, invalid value, missing input."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _key_table() -> dict:
    """name -> converter for every configurable key."""
    from .net import NetConfig
    from .synth import SynthConfig

    table = {}
    for cls in (SynthConfig, NetConfig):
        for f in fields(cls):
            default = getattr(cls(), f.name)
            if isinstance(default, bool):
                table[f.name] = _parse_bool
            elif isinstance(default, tuple):
                table[f.name] = _parse_tuple
            else:
                table[f.name] = type(default)
    for name, (typ, _) in RUN_KEYS.items():
        table[name] = typ
    return table


def _convert(table: dict, key: str, text: str):
    if key not in table:
        raise UsageError(f"unknown configuration key {key!r}")
    try:
        return table[key](text)
    except ValueError as e:
        raise UsageError(f"bad value for {key}: {e}") from None


def read_config(path, table: dict | None = None) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    table = table or _key_table()
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (t.strip() for t in s.split("=", 1))
            try:
                out[key.replace("-", "_")] = _convert(table, key.replace("-", "_"), value)
            except UsageError as e:
                raise UsageError(f"{path}:{lineno}: {e}") from None
    return out


def resolve_options(args: argparse.Namespace, table: dict) -> dict:
    """Defaults, then the config file, then flags given on the command line."""
    opts = {k: d for k, (_, d) in RUN_KEYS.items()}
    if args.config:
        _require_file(args.config, "config file")
        opts.update(read_config(args.config, table))
    for key in table:
        raw = getattr(args, "opt_" + key, None)
        if raw is not None:
            opts[key] = _convert(table, key, raw)
    return opts


def synth_config(opts: dict):
    from .synth import SynthConfig

    names = {f.name for f in fields(SynthConfig)}
    try:
        return SynthConfig(**{k: v for k, v in opts.items() if k in names})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid generator configuration: {e}") from None


def net_config(opts: dict):
    from .net import NetConfig

    names = {f.name for f in fields(NetConfig)}
    try:
        return NetConfig(**{k: v for k, v in opts.items() if k in names})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid network configuration: {e}") from None


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _require_out(opts: dict, what: str = "--out") -> Path:
    if not opts.get("out"):
        raise UsageError(f"{what} is required")
    p = Path(opts["out"])
    if not p.parent.is_dir():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _positive(opts: dict, key: str):
    if opts[key] < 1:
        raise UsageError(f"--{key} must be >= 1, got {opts[key]}")


def _load_bank(opts: dict):
    if not opts.get("noise_bank"):
        return None
    from .dataio import read_noise_bank

    return read_noise_bank(_require_file(opts["noise_bank"], "noise bank"))


def _emit(report: dict, out=None):
    """Key/value lines for scalars, then the full report as one JSON line."""
    out = out or sys.stdout
    for k, v in report.items():
        if isinstance(v, (int, float, str)) or v is None:
            print(f"{k}: {v}", file=out)
    print(json.dumps(report, sort_keys=True, default=_jsonable), file=out)


def _jsonable(v):
    import numpy as np

    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serialisable: {type(v).__name__}")


# -- commands -----------------------------------------------------------------


def cmd_generate(args, opts) -> int:
    from collections import Counter

    from .dataio import DatasetWriter
    from .synth import generate_dataset

    _positive(opts, "count")
    out = _require_out(opts)
    cfg = synth_config(opts)
    bank = _load_bank(opts)
    counts = Counter()
    positives = 0
    with DatasetWriter(out, cfg.width, cfg.height, cfg.world_x, cfg.world_y) as w:
        for i, s in enumerate(generate_dataset(cfg, opts["count"], cfg.seed, bank), 1):
            w.write(s.surface, s.truth)
            counts[len(s.provenance["dents"])] += 1
            positives += s.truth.positives
            if i % 1000 == 0:
                print(f"generated {i}/{opts['count']}", file=sys.stderr)
    n = opts["count"]
    p, q = cfg.dent_prob, cfg.dent_decay
    expected_mean, reach = 0.0, 1.0
    for k in range(cfg.max_dents):
        reach *= p * q**k
        expected_mean += reach
    _emit({
        "samples": n,
        "path": str(out),
        "with_dents": sum(c for k, c in counts.items() if k > 0) / n,
        "with_dents_expected": p,
        "dents_per_sample": sum(k * c for k, c in counts.items()) / n,
        "dents_per_sample_expected": expected_mean,
        "dented_cell_fraction": positives / (n * cfg.width * cfg.height),
        "dent_histogram": {str(k): counts[k] for k in sorted(counts)},
    })
    return EXIT_OK


def cmd_ingest_noise(args, opts) -> int:
    from .dataio import read_cloud, write_noise_bank
    from .noisebank import NoiseBank, ingest_flat_scan, synthetic_bank

    out = _require_out(opts)
    if args.synthetic:
        cfg = synth_config(opts)
        bank = synthetic_bank(args.synthetic, cfg.width, cfg.height, cfg.seed)
    elif args.scans:
        maps = []
        for path in (_require_file(p, "scan") for p in args.scans):
            cloud = read_cloud(path, args.format)
            cloud = getattr(cloud, "grid", cloud)
            maps.append(ingest_flat_scan(cloud, path.name))
        bank = NoiseBank(tuple(maps))
    else:
        raise UsageError("give flat-board scan files or --synthetic N")
    write_noise_bank(out, bank)
    vals = [m.residuals.values for m in bank.maps]
    _emit({"maps": len(bank), "path": str(out), "height": vals[0].shape[0],
           "width": vals[0].shape[1], "rms": float(sum((v.astype(float) ** 2).mean() for v in vals)
                                                   / len(vals)) ** 0.5})
    return EXIT_OK


def _dataset_arrays(path):
    from .dataio import read_dataset
    from .pipeline import residual_arrays

    pairs = ((g, m) for g, m in read_dataset(path) if m is not None)
    return residual_arrays(pairs)


def cmd_train(args, opts) -> int:
    import numpy as np

    from .metrics import all_positive_iou, best_threshold_baseline
    from .net import build, save, train
    from .pipeline import synthetic_arrays

    out = _require_out(opts)
    ncfg = net_config(opts)
    if args.dataset:
        if opts.get("noise_bank"):
            raise UsageError("--noise-bank applies to generated data; mix noise in at generate time")
        x, y = _dataset_arrays(_require_file(args.dataset, "dataset"))
        source = str(args.dataset)
    else:
        _positive(opts, "count")
        scfg = synth_config(opts)
        x, y = synthetic_arrays(scfg, opts["count"], scfg.seed, _load_bank(opts))
        source = "generated"
    if not 0 < opts["val_fraction"] < 1:
        raise UsageError("--val-fraction must lie in (0, 1)")
    n_train = int(round(len(x) * (1 - opts["val_fraction"])))
    if n_train < 1 or n_train >= len(x):
        raise UsageError(f"{len(x)} samples cannot be split with val_fraction {opts['val_fraction']}")
    tr, va = (x[:n_train], y[:n_train]), (x[n_train:], y[n_train:])

    def progress(epoch, rep):
        print(f"epoch {epoch}: loss {rep.epoch_losses[-1]:.4f} val IoU {rep.val_ious[-1]:.4f}",
              file=sys.stderr)

    net = build(ncfg)
    rep = train(net, tr, va, ncfg, callback=progress)
    report = {
        "source": source,
        "noise_bank": opts.get("noise_bank"),
        "train_samples": len(tr[0]),
        "val_samples": len(va[0]),
        "best_iou": rep.best_iou,
        "best_epoch": rep.best_epoch,
        "seconds": rep.seconds,
        "baseline_all_positive_iou": all_positive_iou(va[1]),
        "baseline_threshold_iou": best_threshold_baseline(va[0], va[1])[0],
        "epoch_losses": rep.epoch_losses,
        "val_ious": rep.val_ious,
        "parameters": net.parameter_count(),
        "checkpoint": str(out),
    }
    save(net, out, {k: report[k] for k in ("source", "noise_bank", "best_iou", "best_epoch")})
    _emit({k: (float(v) if isinstance(v, np.floating) else v) for k, v in report.items()})
    return EXIT_OK


def _load_net(opts, required=True):
    from .net import load

    if not opts.get("checkpoint"):
        if required:
            raise UsageError("--checkpoint is required")
        return None
    net = load(_require_file(opts["checkpoint"], "checkpoint"))
    if "threshold" in opts and opts["threshold"] is not None:
        net.config = replace(net.config, threshold=opts["threshold"])
    return net


def _read_grid(path, fmt):
    from .dataio import read_cloud

    cloud = read_cloud(_require_file(path, "cloud"), fmt)
    return getattr(cloud, "grid", cloud)


def _explicit(args, key):
    return getattr(args, "opt_" + key, None) is not None


def cmd_predict(args, opts) -> int:
    import numpy as np
    from PIL import Image

    from .dataio import atomic_write, write_overlay
    from .net import predict
    from .preprocess import preprocess

    out = _require_out(opts)
    if args.overlay and not Path(args.overlay).parent.is_dir():
        raise UsageError(f"output directory does not exist: {Path(args.overlay).parent}")
    opts = {**opts, "threshold": opts["threshold"] if _explicit(args, "threshold") else None}
    net = _load_net(opts)
    grid = _read_grid(args.cloud, args.format)
    pre = preprocess(grid)
    mask, probs = predict(net, pre)
    import io

    buf = io.BytesIO()
    Image.fromarray((mask.values * 255).astype(np.uint8), "L").save(buf, format="PNG")
    atomic_write(out, buf.getvalue())
    if args.overlay:
        write_overlay(pre.residuals, mask, args.overlay, scale=args.scale)
    _emit({"width": grid.width, "height": grid.height, "dented_cells": mask.positives,
           "dented_fraction": mask.positives / mask.values.size,
           "threshold": net.config.threshold, "mask": str(out), "overlay": args.overlay})
    return EXIT_OK


def cmd_evaluate(args, opts) -> int:
    from .dataio import dataset_header, read_dataset
    from .metrics import score_dataset

    path = _require_file(args.dataset, "dataset")
    if not dataset_header(path).has_mask:
        raise UsageError(f"{path} holds no ground-truth masks")
    if args.oracle:
        predictor, batch = (lambda truths: truths), 64
        stream = ((m, m) for _, m in read_dataset(path))
        name = "oracle"
    else:
        opts = {**opts, "threshold": opts["threshold"] if _explicit(args, "threshold") else None}
        predictor, batch = _load_net(opts), 8
        stream = read_dataset(path)
        name = str(opts["checkpoint"])
    metrics, cm = score_dataset(predictor, stream, batch)
    report = {"predictor": name, "dataset": str(path), **metrics.to_dict(),
              "confusion": cm.to_dict(), "cells": cm.total}
    if opts.get("out"):
        from .dataio import atomic_write

        atomic_write(_require_out(opts), (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    _emit(report)
    return EXIT_OK


def cmd_bench(args, opts) -> int:
    from .metrics import bench
    from .net import build
    from .synth import generate_dataset

    if opts["reps"] < 3:
        raise UsageError("--reps must be >= 3 (the median is reported)")
    net = _load_net(opts, required=False)
    if args.cloud:
        grid = _read_grid(args.cloud, args.format)
    else:
        cfg = synth_config(opts)
        grid = next(generate_dataset(cfg, 1, cfg.seed)).surface
    if net is None:
        net = build(net_config(opts))
    rep = bench(net, grid, opts["reps"])
    report = rep.to_dict()
    report["untrained"] = not opts.get("checkpoint")
    _emit(report)
    return EXIT_OK


def cmd_render(args, opts) -> int:
    import itertools

    from .dataio import read_dataset, write_overlay
    from .net import predict
    from .preprocess import preprocess

    path = _require_file(args.dataset, "dataset")
    out = _require_out(opts)
    net = _load_net(opts, required=False)
    item = next(itertools.islice(read_dataset(path), args.index, None), None)
    if item is None:
        raise UsageError(f"{path} has no sample {args.index}")
    grid, truth = item
    pre = preprocess(grid)
    if net is not None:
        pred = predict(net, pre)[0]
        write_overlay(pre.residuals, pred, out, truth=truth, scale=args.scale)
    else:
        write_overlay(pre.residuals, truth, out, scale=args.scale)
    _emit({"dataset": str(path), "index": args.index, "image": str(out),
           "coloured_by": "prediction vs truth" if net is not None else "truth"})
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic labelled dataset"),
    "ingest-noise": (cmd_ingest_noise, "build a noise bank from flat-board scans"),
    "train": (cmd_train, "train a segmentation network and save a checkpoint"),
    "predict": (cmd_predict, "segment one scan into a mask (and overlay)"),
    "evaluate": (cmd_evaluate, "score a checkpoint on a dataset"),
    "bench": (cmd_bench, "measure preprocessing and inference throughput"),
    "render": (cmd_render, "draw one dataset sample as an overlay image"),
}


def build_parser(table: dict | None = None) -> argparse.ArgumentParser:
    table = table or _key_table()
    parser = argparse.ArgumentParser(prog="dentseg", description="Dent segmentation on 3D scans.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        keys = p.add_argument_group("configuration keys (also valid in --config files)")
        for key in table:
            keys.add_argument("--" + key.replace("_", "-"), dest="opt_" + key, metavar="V")
        if name == "ingest-noise":
            p.add_argument("scans", nargs="*", help="flat-board scan files")
            p.add_argument("--synthetic", type=int, metavar="N",
                           help="use N synthetic flat-board scans at --width x --height instead")
        if name == "train":
            p.add_argument("dataset", nargs="?", help="dataset container (default: generate --count)")
        if name in ("predict", "bench"):
            p.add_argument("cloud", nargs="?" if name == "bench" else None, help="scan file")
        if name in ("ingest-noise", "predict", "bench"):
            p.add_argument("--format", choices=("grid", "binary", "points"),
                           help="scan file format (guessed when omitted)")
        if name in ("evaluate", "render"):
            p.add_argument("dataset", help="dataset container")
        if name == "evaluate":
            p.add_argument("--oracle", action="store_true",
                           help="score the ground truth against itself")
        if name == "predict":
            p.add_argument("--overlay", help="also write an overlay PNG here")
        if name == "render":
            p.add_argument("--index", type=int, default=0, help="sample index")
        if name in ("predict", "render"):
            p.add_argument("--scale", type=int, default=1, help="pixel upscaling of images")
    return parser


def _apply_threads(argv: list[str]):
    """Cap BLAS worker threads; effective only before numpy is first imported."""
    for i, a in enumerate(argv):
        value = a.split("=", 1)[1] if a.startswith("--threads=") else (
            argv[i + 1] if a == "--threads" and i + 1 < len(argv) else None)
        if value is not None and value.isdigit() and int(value) > 0:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = value


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    from .dataio import FormatError
    from .grid import GridError
    from .net import CheckpointError
    from .preprocess import FitError

    table = _key_table()
    parser = build_parser(table)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    command = COMMANDS[args.command][0]
    try:
        opts = resolve_options(args, table)
        return command(args, opts)
    except UsageError as e:
        print(f"dentseg {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointError, GridError, FitError, OSError, ValueError) as e:
        print(f"dentseg {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
