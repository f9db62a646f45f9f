"""Central-difference gradient checking against the tape.

``check(fn, inputs)`` perturbs every element of every input tensor, evaluates
``fn`` (which must return a single-element Tensor) on both sides and compares
against the gradients produced by :func:`iekd.tensor.backward`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, recording

STEP = 1e-5
# below this magnitude an element is compared in absolute rather than relative terms
FLOOR = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def tape_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list:
    for t in inputs:
        t.grad = None
    with recording():
        loss = fn()
        backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP) -> float:
    """Largest elementwise relative error over all inputs."""
    analytic = tape_gradients(fn, inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(fn, t, step)))
    return worst


def _param(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        # keep away from kinks (|x| > low) so central differences don't straddle them
        data = np.sign(data) * (np.abs(data) + low)
    return Tensor(data, requires_grad=True)


def default_suite(seed: int = 0) -> list:
    """(name, fn, inputs, tolerance) cases covering every differentiable op."""
    from .losses import MetricKind, exploration_loss, ieod_losses, inheritance_loss
    from .nets import attention_map

    rng = np.random.default_rng(seed)
    cases = []

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = Tensor(rng.standard_normal((3, 4)))
    cases.append(("add", lambda: ops.sum(ops.mul(ops.add(a, b), w)), [a, b], 1e-6))
    cases.append(("sub", lambda: ops.sum(ops.mul(ops.sub(a, b), w)), [a, b], 1e-6))
    cases.append(("scale", lambda: ops.sum(ops.mul(ops.scale(a, -2.5), w)), [a], 1e-6))
    cases.append(("neg", lambda: ops.sum(ops.mul(ops.neg(a), w)), [a], 1e-6))
    cases.append(("mul", lambda: ops.sum(ops.mul(a, b)), [a, b], 1e-4))
    s = _param(rng, 1)
    cases.append(("mul_scalar", lambda: ops.sum(ops.mul(ops.mul(a, s), w)), [a, s], 1e-4))
    k = _param(rng, 3, 4, low=0.1)
    cases.append(("abs", lambda: ops.sum(ops.mul(ops.abs(k), w)), [k], 1e-4))
    cases.append(("relu", lambda: ops.sum(ops.mul(ops.relu(k), w)), [k], 1e-4))
    cases.append(("leaky_relu", lambda: ops.sum(ops.mul(ops.leaky_relu(k, 0.1), w)), [k], 1e-4))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    cases.append(("div", lambda: ops.sum(ops.div(a, pos)), [a, pos], 1e-4))
    cases.append(("sqrt", lambda: ops.sum(ops.mul(ops.sqrt(pos), w)), [pos], 1e-4))
    cases.append(("l1_norm", lambda: ops.l1_norm(k), [k], 1e-4))
    cases.append(("l2_norm", lambda: ops.l2_norm(a), [a], 1e-4))
    cases.append(("l2_norm_rows", lambda: ops.sum(ops.l2_norm(a, axes=1)), [a], 1e-4))
    cases.append(("mean", lambda: ops.mean(ops.mul(a, w), axes=0).sum(), [a], 1e-6))
    col = _param(rng, 3, 1)
    cases.append(("broadcast", lambda: ops.sum(ops.mul(ops.broadcast_to(col, (3, 4)), w)), [col], 1e-6))

    m1, m2 = _param(rng, 3, 4), _param(rng, 4, 2)
    w2 = Tensor(rng.standard_normal((3, 2)))
    cases.append(("matmul", lambda: ops.sum(ops.mul(ops.matmul(m1, m2), w2)), [m1, m2], 1e-6))

    x = _param(rng, 1, 2, 4, 4)
    kern = _param(rng, 3, 2, 3, 3)
    wc = Tensor(rng.standard_normal((1, 3, 4, 4)))
    cases.append(("conv2d", lambda: ops.sum(ops.mul(ops.conv2d(x, kern), wc)), [x, kern], 1e-5))
    y = _param(rng, 1, 3, 4, 4)
    wt = Tensor(rng.standard_normal((1, 2, 4, 4)))
    cases.append(("conv2d_transpose", lambda: ops.sum(ops.mul(ops.conv2d_transpose(y, kern), wt)), [y, kern], 1e-5))
    wp = Tensor(rng.standard_normal((1, 3, 2, 2)))
    cases.append(("avg_pool2", lambda: ops.sum(ops.mul(ops.avg_pool2(y), wp)), [y], 1e-6))

    xb = _param(rng, 4, 3, 3, 3)
    gam = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    bet = _param(rng, 3)
    wb = Tensor(rng.standard_normal((4, 3, 3, 3)))
    rm, rv = np.zeros(3), np.ones(3)
    cases.append((
        "batch_norm_train",
        lambda: ops.sum(ops.mul(ops.batch_norm(xb, gam, bet, rm, rv, train=True, update_stats=False), wb)),
        [xb, gam, bet],
        1e-4,
    ))
    rm2, rv2 = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    cases.append((
        "batch_norm_eval",
        lambda: ops.sum(ops.mul(ops.batch_norm(xb, gam, bet, rm2, rv2, train=False), wb)),
        [xb, gam, bet],
        1e-4,
    ))

    logits = _param(rng, 5, 4)
    labels = rng.integers(0, 4, 5)
    cases.append(("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(logits, labels), [logits], 1e-4))

    idx = np.array([1, 0, 1])
    wk = Tensor(rng.standard_normal((1, 3, 4, 4)))
    cases.append(("take", lambda: ops.sum(ops.mul(ops.take(x, idx, axis=1), wk)), [x], 1e-6))

    fi, ft = _param(rng, 3, 2, 2, 2), Tensor(rng.standard_normal((3, 2, 2, 2)))
    for kind in MetricKind:
        cases.append((f"inheritance_{kind.value}", lambda kind=kind: inheritance_loss(fi, ft, kind), [fi], 1e-4))
        cases.append((f"exploration_{kind.value}", lambda kind=kind: exploration_loss(fi, ft, kind), [fi], 1e-4))
    fe = _param(rng, 3, 2, 2, 2, low=0.05)
    ftr = Tensor(np.sign(ft.data) * (np.abs(ft.data) + 0.05))
    cases.append(("ieod_inheritance", lambda: ieod_losses(fe, fe, ftr)[0], [fe], 1e-4))
    cases.append(("ieod_exploration", lambda: ieod_losses(fe, fe, ftr)[1], [fe], 1e-4))
    fa = _param(rng, 2, 3, 3, 3)
    wa = Tensor(rng.standard_normal((2, 9)))
    cases.append(("attention_map", lambda: ops.sum(ops.mul(attention_map(fa), wa)), [fa], 1e-4))

    # composed objective: conv -> BN -> leaky -> split -> encoders -> all loss terms
    cases.append(_composed_case(rng))
    return cases


def _composed_case(rng):
    from .losses import MetricKind, exploration_loss, inheritance_loss, total_student_loss

    x = Tensor(rng.standard_normal((3, 1, 4, 4)))
    k1 = _param(rng, 4, 1, 3, 3)
    g1, b1 = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True), _param(rng, 4)
    ke_inh, ke_exp = _param(rng, 2, 2, 3, 3), _param(rng, 2, 2, 3, 3)
    wd = _param(rng, 4, 3)
    target = Tensor(rng.standard_normal((3, 2, 4, 4)))
    labels = rng.integers(0, 3, 3)
    rm, rv = np.zeros(4), np.ones(4)

    def fn():
        h = ops.leaky_relu(ops.batch_norm(ops.conv2d(x, k1), g1, b1, rm, rv, update_stats=False), 0.1)
        f_inh, f_exp = ops.take(h, [0, 2], axis=1), ops.take(h, [1, 3], axis=1)
        F_inh = ops.conv2d(f_inh, ke_inh)
        F_exp = ops.conv2d(f_exp, ke_exp)
        logits = ops.matmul(ops.mean(h, axes=(2, 3)), wd)
        goal = ops.softmax_cross_entropy(logits, labels)
        inh = inheritance_loss(F_inh, target, MetricKind.L1_NORMALIZED)
        exp = exploration_loss(F_exp, target, MetricKind.L1_NORMALIZED)
        return total_student_loss(goal, inh, exp, 50.0, 50.0)

    return ("composed_student_objective", fn, [k1, g1, b1, ke_inh, ke_exp, wd], 1e-4)


def run_suite(seed: int = 0) -> list:
    results = []
    for name, fn, inputs, tol in default_suite(seed):
        t0 = time.perf_counter()
        err = check(fn, inputs)
        results.append(GradCheckResult(name, err, tol, time.perf_counter() - t0))
    return results
