"""
Training a small segmentation network
=====================================

A shortened version of the desk-scale experiment: a few hundred synthetic
scans, a narrow network and two epochs. The trained model is compared with
two trivial baselines, scored with pooled confusion counts, saved and
reloaded.
"""
import logging
from pathlib import Path

import numpy as np

from dentseg.metrics import all_positive_iou, best_threshold_baseline, score_dataset
from dentseg.net import NetConfig, build, load, predict_proba, save, train
from dentseg.pipeline import split, synthetic_arrays
from dentseg.synth import SynthConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")
OUT = Path(__file__).with_name("output")
OUT.mkdir(exist_ok=True)

# 300 scans -> 240 for training, 60 for validation.
x, y = synthetic_arrays(SynthConfig(), 300, seed=1)
(train_x, train_y), (val_x, val_y) = split(x, y, 0.8)
print(f"{len(train_x)} training / {len(val_x)} validation samples, "
      f"{100 * y.mean():.1f}% of cells dented")

net = build(NetConfig(stem=8, epochs=2, seed=0))
print(f"{net.parameter_count():,} trainable parameters")
report = train(net, (train_x, train_y), (val_x, val_y))
print("validation IoU per epoch:", np.round(report.val_ious, 3))

# The baselines mark everything dented, or threshold the residual directly
# (with the cut-off tuned on the validation set itself).
print(f"all-positive IoU {all_positive_iou(val_y):.3f}")
print("best residual threshold IoU %.3f at %.2f mm" % best_threshold_baseline(val_x, val_y))

metrics, cm = score_dataset(lambda xs: list(predict_proba(net, np.stack(xs)) >= 0.5),
                            zip(val_x, val_y))
print(f"network: IoU {metrics.iou:.3f}, precision {metrics.precision:.3f}, "
      f"recall {metrics.recall:.3f}, accuracy {metrics.accuracy:.3f}")
print("confusion (% of cells):", {k: round(100 * v, 2) for k, v in cm.fractions().to_dict().items()})

path = OUT / "small.dntk"
save(net, path, {"demo": "03"})
again = load(path)
same = np.array_equal(predict_proba(net, val_x[:4]), predict_proba(again, val_x[:4]))
print(f"checkpoint {path.name}: {path.stat().st_size:,} bytes, reload identical: {same}")
