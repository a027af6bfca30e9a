"""Central finite-difference checks of every hand-written backward pass.

Runs in float64. Each kernel is exercised on randomized small shapes; the
scalar objective is ``sum(out * R)`` for a fixed random ``R`` unless the
kernel already produces a scalar loss. The reported error for one trial is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` taken per
gradient tensor; a kernel's figure is the worst over its trials.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .adapt import entropy_loss
from .lane import RowAnchorGrid, pretrain_loss
from .nn import ADAPT, bn_backward, bn_forward

F64 = K.CHECK_DTYPE
STEP = 1e-5
TOLERANCE = 1e-5


def numerical_grad(f, x, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


# each case returns a list of (analytic, numeric) pairs

def case_conv(rng, impl=None):
    backward = impl or K.conv2d_backward
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = (int(v) for v in rng.integers(k, 7, size=2))
    # keep output size integral for the chosen stride
    h += (h + 2 * pad - k) % stride
    w += (w + 2 * pad - k) % stride
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    out, cache = K.conv2d_forward(x, wt, stride, pad)
    r = rng.standard_normal(out.shape)
    dx, dw = backward(cache, r)

    def f():
        return float((K.conv2d_forward(x, wt, stride, pad)[0] * r).sum())

    return [(dx, numerical_grad(f, x)), (dw, numerical_grad(f, wt))]


def case_linear(rng, impl=None):
    backward = impl or K.linear_backward
    n, din, dout = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 6)
    x = rng.standard_normal((n, din))
    w = rng.standard_normal((dout, din))
    b = rng.standard_normal(dout)
    out, cache = K.linear_forward(x, w, b)
    r = rng.standard_normal(out.shape)
    dx, dw, db = backward(cache, r)

    def f():
        return float((K.linear_forward(x, w, b)[0] * r).sum())

    return [(dx, numerical_grad(f, x)), (dw, numerical_grad(f, w)), (db, numerical_grad(f, b))]


def case_relu(rng, impl=None):
    backward = impl or K.relu_backward
    x = _away_from_zero(rng, tuple(rng.integers(1, 5, size=3)))
    out, cache = K.relu_forward(x)
    r = rng.standard_normal(out.shape)
    dx = backward(cache, r)
    return [(dx, numerical_grad(lambda: float((K.relu_forward(x)[0] * r).sum()), x))]


def case_maxpool(rng, impl=None):
    backward = impl or K.maxpool2_backward
    n, c = rng.integers(1, 3), rng.integers(1, 3)
    h, w = 2 * rng.integers(1, 4), 2 * rng.integers(1, 4)
    # distinct values spaced far beyond the FD step, so argmax never flips
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01 + rng.standard_normal() * 0.001
    out, cache = K.maxpool2_forward(x)
    r = rng.standard_normal(out.shape)
    dx = backward(cache, r)
    return [(dx, numerical_grad(lambda: float((K.maxpool2_forward(x)[0] * r).sum()), x))]


def case_bn(rng, impl=None):
    backward = impl or bn_backward
    while True:
        n, c, h, w = (int(v) for v in rng.integers(1, 4, size=4))
        if n * h * w >= 4:
            break
    x = rng.standard_normal((n, c, h, w)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    gamma = rng.uniform(0.5, 2, c)
    beta = rng.standard_normal(c)
    rm, rv = np.zeros(c), np.ones(c)

    def fwd():
        return bn_forward(x, gamma, beta, rm, rv, mode=ADAPT)

    out, cache = fwd()
    r = rng.standard_normal(out.shape)
    dx, dgamma, dbeta = backward(cache, r)

    def f():
        return float((fwd()[0] * r).sum())

    return [(dx, numerical_grad(f, x)), (dgamma, numerical_grad(f, gamma)),
            (dbeta, numerical_grad(f, beta))]


def case_group_softmax(rng, impl=None):
    backward = impl or K.group_softmax_backward
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2)) + (int(rng.integers(2, 7)),)
    z = rng.standard_normal(shape) * 2
    r = rng.standard_normal(shape)
    dz = backward(K.group_softmax(z), r)
    return [(dz, numerical_grad(lambda: float((K.group_softmax(z) * r).sum()), z))]


def case_entropy(rng, impl=None):
    loss_fn = impl or entropy_loss
    shape = (int(rng.integers(1, 3)), int(rng.integers(2, 7)),
             int(rng.integers(1, 4)), int(rng.integers(1, 3)))
    z = rng.standard_normal(shape) * 2
    _, dz = loss_fn(z)
    return [(dz, numerical_grad(lambda: loss_fn(z)[0], z))]


def case_pretrain(rng, impl=None):
    loss_fn = impl or pretrain_loss
    grid = RowAnchorGrid(grid_cells=int(rng.integers(2, 6)), row_anchors=int(rng.integers(1, 4)),
                         lanes=int(rng.integers(1, 3)), width=32, height=32)
    n = int(rng.integers(1, 3))
    z = rng.standard_normal((n,) + grid.logits_shape) * 2
    cells = rng.integers(0, grid.grid_cells + 1, size=(n, grid.row_anchors, grid.lanes))
    _, dz = loss_fn(z, cells, grid)
    return [(dz, numerical_grad(lambda: loss_fn(z, cells, grid)[0], z))]


CASES = {
    "conv2d": case_conv,
    "linear": case_linear,
    "relu": case_relu,
    "maxpool2": case_maxpool,
    "batchnorm": case_bn,
    "group_softmax": case_group_softmax,
    "entropy_loss": case_entropy,
    "pretrain_loss": case_pretrain,
}


@dataclass
class KernelResult:
    kernel: str
    trials: int
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE


def run_gradcheck(seed=0, trials=100, overrides=None, kernels=None):
    """Return one ``KernelResult`` per kernel.

    ``overrides`` maps a kernel name to a replacement backward (or loss)
    function, which is how fault-injection tests exercise the checker.
    """
    overrides = overrides or {}
    results = []
    for i, name in enumerate(kernels or CASES):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(trials):
            for analytic, numeric in CASES[name](rng, overrides.get(name)):
                worst = max(worst, rel_error(np.asarray(analytic, F64), numeric))
        results.append(KernelResult(name, trials, worst))
    return results


def format_table(results):
    lines = [f"{'kernel':<15} {'trials':>6} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.kernel:<15} {r.trials:>6} {r.max_rel_error:>12.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
