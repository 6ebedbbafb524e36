"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .layers import BatchNorm2d, Conv2d, Linear, Module, init_parameters
from .tensor import GradTape, Tensor

STEP = 1e-5
# denominators below this are treated as absolute error
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f()
        flat[i] = orig - step
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * step)
    return grad


def check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], step: float = STEP,
          before_eval: Callable[[], None] | None = None) -> float:
    """Max elementwise relative error between tape and finite-difference gradients.

    ``fn`` must build a scalar from the tensors in ``wrt``; ``before_eval``
    runs before every evaluation (used to reset running statistics).
    """
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    if before_eval:
        before_eval()
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in wrt]

    def value() -> float:
        if before_eval:
            before_eval()
        return float(fn().data)

    worst = 0.0
    for t, a in zip(wrt, analytic):
        n = numeric_grad(value, t, step)
        worst = max(worst, float(relative_error(a, n).max()))
    return worst


def _projection(shape, rng) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _weighted_sum(y: Tensor, r: Tensor) -> Tensor:
    return ops.sum(ops.mul(y, r))


def op_suite(seed: int = 0) -> list[GradCheckResult]:
    """Gradient checks for each differentiable primitive in 64-bit."""
    rng = np.random.default_rng(seed)
    t = lambda *shape: Tensor(rng.standard_normal(shape))  # noqa: E731
    results = []

    def add(name, fn, wrt, tol=1e-4, before_eval=None):
        results.append(GradCheckResult(name, check(fn, wrt, before_eval=before_eval), tol))

    x, w = t(2, 3, 5, 5), t(4, 3, 3, 3)
    r = _projection((2, 4, 3, 3), rng)
    add("conv2d 3x3 stride 2 pad 1", lambda: _weighted_sum(ops.conv2d(x, w, 2, 1), r), [x, w])
    x1, w1 = t(2, 5, 3, 3), t(4, 5, 1, 1)
    r1 = _projection((2, 4, 3, 3), rng)
    add("conv2d 1x1", lambda: _weighted_sum(ops.conv2d(x1, w1), r1), [x1, w1])

    xd, wd = t(2, 3, 6, 6), t(3, 1, 3, 3)
    rd = _projection((2, 3, 3, 3), rng)
    add("depthwise_conv2d 3x3 stride 2", lambda: _weighted_sum(ops.depthwise_conv2d(xd, wd, 2, 1), rd), [xd, wd])
    wd5 = t(3, 1, 5, 5)
    rd5 = _projection((2, 3, 6, 6), rng)
    add("depthwise_conv2d 5x5", lambda: _weighted_sum(ops.depthwise_conv2d(xd, wd5, 1, 2), rd5), [xd, wd5])

    xb, gamma, beta = t(4, 3, 3, 3), t(3), t(3)
    rb = _projection(xb.shape, rng)
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))

    def reset():
        rm.data[...] = 0
        rv.data[...] = 1

    add("batch_norm train", lambda: _weighted_sum(ops.batch_norm(xb, gamma, beta, rm, rv, True), rb),
        [xb, gamma, beta], before_eval=reset)
    rm_e, rv_e = Tensor(rng.standard_normal(3)), Tensor(rng.uniform(0.5, 2, 3))
    add("batch_norm eval", lambda: _weighted_sum(ops.batch_norm(xb, gamma, beta, rm_e, rv_e, False), rb),
        [xb, gamma, beta])

    xs = t(2, 8, 3, 3)
    sw1, sb1, sw2, sb2 = t(2, 8, 1, 1), t(2), t(8, 2, 1, 1), t(8)
    rs = _projection(xs.shape, rng)
    add("squeeze_excitation", lambda: _weighted_sum(ops.squeeze_excitation(xs, sw1, sb1, sw2, sb2), rs),
        [xs, sw1, sb1, sw2, sb2])

    xa = t(2, 3, 4, 4)
    ra = _projection(xa.shape, rng)
    add("swish", lambda: _weighted_sum(ops.swish(xa), ra), [xa])
    add("sigmoid", lambda: _weighted_sum(ops.sigmoid(xa), ra), [xa])
    rg = _projection((2, 3, 1, 1), rng)
    add("global_avg_pool", lambda: _weighted_sum(ops.global_avg_pool(xa), rg), [xa])
    xc2 = t(2, 2, 4, 4)
    rc = _projection((2, 5, 4, 4), rng)
    add("concat", lambda: _weighted_sum(ops.concat([xa, xc2]), rc), [xa, xc2])
    xm = t(2, 3, 1, 1)
    add("mul broadcast", lambda: _weighted_sum(ops.mul(xa, xm), ra), [xa, xm])
    add("add broadcast", lambda: _weighted_sum(ops.add(xa, xm), ra), [xa, xm])
    add("sub broadcast", lambda: _weighted_sum(ops.sub(xa, xm), ra), [xa, xm])
    add("neg", lambda: _weighted_sum(ops.neg(xa), ra), [xa])
    add("scale", lambda: _weighted_sum(ops.scale(xa, -1.7), ra), [xa])
    # standard normal entries sit far from the kink relative to the FD step
    add("relu", lambda: _weighted_sum(ops.relu(xa), ra), [xa])
    add("sum", lambda: ops.sum(ops.swish(xa)), [xa])
    add("mean", lambda: ops.mean(ops.swish(xa)), [xa])
    rr = _projection((6, 16), rng)
    add("reshape", lambda: _weighted_sum(ops.reshape(xa, (6, 16)), rr), [xa])

    keep_rng_seed = seed + 1
    add("drop_connect train", lambda: _weighted_sum(
        ops.drop_connect(xa, 0.5, True, np.random.default_rng(keep_rng_seed)), ra), [xa])

    xf, wf, bf = t(3, 6), t(4, 6), t(4)
    rf = _projection((3, 4), rng)
    add("fully_connected", lambda: _weighted_sum(ops.fully_connected(xf, wf, bf), rf), [xf, wf, bf])
    logits = t(5, 4)
    labels = rng.integers(0, 4, 5)
    add("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(logits, labels), [logits])
    return results


class TinyNet(Module):
    """conv -> BN -> swish -> GAP -> FC, used for the composite check."""

    def __init__(self, channels: int = 2, classes: int = 3, dtype=np.float64):
        super().__init__()
        self.add_child("conv", Conv2d(channels, 4, 3, dtype=dtype))
        self.add_child("bn", BatchNorm2d(4, dtype=dtype))
        self.add_child("fc", Linear(4, classes, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        h = ops.swish(self.bn(self.conv(x)))
        return self.fc(ops.global_avg_pool(h))


def composite_check(seed: int = 0) -> GradCheckResult:
    """Whole-model check over every parameter of :class:`TinyNet` (2 channels, 8x8)."""
    rng = np.random.default_rng(seed)
    net = TinyNet()
    init_parameters(net, seed)
    x = Tensor(rng.standard_normal((4, 2, 8, 8)))
    labels = rng.integers(0, 3, 4)
    bn = net.bn

    def reset():
        bn.running_mean.data[...] = 0
        bn.running_var.data[...] = 1

    err = check(lambda: ops.softmax_cross_entropy(net(x), labels), net.parameters(), before_eval=reset)
    return GradCheckResult("composite conv-BN-swish-GAP-FC-CE", err, 1e-3)


def full_suite(seed: int = 0) -> list[GradCheckResult]:
    return op_suite(seed) + [composite_check(seed)]
