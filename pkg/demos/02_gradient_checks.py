"""
Checking the autodiff engine
============================

Every layer of the network has a hand-written backward pass. Here each one
is compared against central finite differences, first in float64 and then
in the float32 precision used for training.
"""
import numpy as np

from dentseg.autograd import Tensor, gradcheck
from dentseg.autograd import functional as F

rng = np.random.default_rng(0)


def param(*shape, dtype=np.float64):
    return Tensor(rng.normal(size=shape).astype(dtype), requires_grad=True)


for dtype, tol in ((np.float64, 1e-6), (np.float32, 1e-3)):
    x = param(2, 3, 8, 8, dtype=dtype)
    w = param(4, 3, 3, 3, dtype=dtype)
    wt = param(3, 2, 3, 3, dtype=dtype)
    b = param(4, dtype=dtype)
    g, beta = param(3, dtype=dtype), param(3, dtype=dtype)
    logits = param(2, 1, 8, 8, dtype=dtype)
    y = (rng.random((2, 1, 8, 8)) < 0.3).astype(dtype)
    cases = {
        "conv2d stride 1": (lambda x, w, b: F.conv2d(x, w, b, 1, 1), [x, w, b]),
        "conv2d stride 2": (lambda x, w, b: F.conv2d(x, w, b, 2, 1), [x, w, b]),
        "conv_transpose2d": (lambda x, w: F.conv_transpose2d(x, w), [x, wt]),
        "batch norm": (lambda x, g, b: F.batch_norm(x, g, b), [x, g, beta]),
        "sigmoid": (F.sigmoid, [x]),
        "concat": (F.concat_channels, [x, x]),
        "weighted BCE": (lambda z: F.weighted_bce(F.sigmoid(z), y, 4.0), [logits]),
    }
    print(f"-- {np.dtype(dtype).name}, tolerance {tol:g}")
    for name, (fn, inputs) in cases.items():
        report = gradcheck(fn, inputs)
        status = "ok" if report.ok(tol) else "FAIL"
        print(f"{name:18s} max relative error {report.max_rel_error:.2e}  {status}")
