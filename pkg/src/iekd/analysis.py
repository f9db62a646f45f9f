"""Representation analysis: linear CKA, active-neuron counting, noise sharpness.

All functions are read-only over networks and data: parameters are restored
bit for bit and no normalization buffers are touched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .errors import DegenerateGradient, DegenerateRepresentation, InvalidConfig, RowMismatch
from .losses import SplitSpec
from .nets import TAP
from .nn import LayerStack
from .tensor import Tensor, backward, no_grad, recording, tensor_from_bytes, tensor_to_bytes

# --- CKA ---------------------------------------------------------------------


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def linear_cka(x, y) -> float:
    """Linear CKA between row-aligned representations (rows = examples)."""
    x, y = _as_rows(x), _as_rows(y)
    if x.shape[0] != y.shape[0]:
        raise RowMismatch(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateRepresentation("CKA needs at least two examples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise DegenerateRepresentation("representation is zero after centering")
    return float(np.linalg.norm(y.T @ x) ** 2 / (xx * yy))


def cka_matrix(reps: dict) -> tuple:
    """(names, matrix) of pairwise CKA values."""
    names = list(reps)
    m = np.ones((len(names), len(names)))
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            m[i, j] = m[j, i] = linear_cka(reps[a], reps[names[j]])
    return names, m


def write_cka_csv(path, names: list, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + names)
        for n, row in zip(names, matrix):
            w.writerow([n] + [repr(float(v)) for v in row])


def tap_features(net: LayerStack, x: np.ndarray, tap: str = TAP, batch_size: int = 250) -> np.ndarray:
    """Tapped block (post-nonlinearity) in eval mode."""
    out = []
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            _, taps = net.forward(Tensor(x[i : i + batch_size]), train=False)
            out.append(taps[tap].data)
    return np.concatenate(out)


def split_cka(net: LayerStack, split: SplitSpec, x: np.ndarray, tap: str = TAP) -> float:
    """CKA between the inheritance and exploration channels of ``net``'s tapped block."""
    f = tap_features(net, x, tap)
    return linear_cka(f[:, list(split.inh_indices)], f[:, list(split.exp_indices)])


# --- active neurons ----------------------------------------------------------


@dataclass
class ActiveNeurons:
    count: int
    spectrum: np.ndarray  # eigenvalues, descending
    tau: float


def representation_gradients(loss_fn: Callable[[Tensor], Tensor], reps: np.ndarray) -> np.ndarray:
    """Per-sample gradients of ``loss_fn`` w.r.t. each row of ``reps``.

    ``loss_fn`` must return the *sum* of per-sample losses so that row i of the
    gradient is the gradient of sample i's loss alone.
    """
    r = Tensor(np.array(reps, dtype=np.float64), requires_grad=True)
    with recording():
        loss = loss_fn(r)
        backward(loss)
    return np.zeros_like(r.data) if r.grad is None else r.grad


def active_neurons(loss_fn: Callable[[Tensor], Tensor], reps: np.ndarray, tau: float = 1e-6,
                   columns: Optional[Sequence[int]] = None) -> ActiveNeurons:
    """Count eigenvalues of the uncentered gradient covariance above ``tau * lambda_max``.

    ``columns`` restricts the count to a subset of representation coordinates.
    """
    g = representation_gradients(loss_fn, reps)
    g = g.reshape(g.shape[0], -1)
    if columns is not None:
        g = g[:, list(columns)]
    if not np.any(g):
        raise DegenerateGradient("loss gradient is zero for every sample")
    cov = g.T @ g / g.shape[0]
    spectrum = np.linalg.eigvalsh(cov)[::-1]
    count = int(np.sum(spectrum > tau * spectrum[0]))
    return ActiveNeurons(count, spectrum, tau)


def head_loss(net: LayerStack, labels: np.ndarray, tap: str = TAP) -> Callable[[Tensor], Tensor]:
    """Summed cross-entropy of the layers after ``tap``, as a function of the tapped block."""
    start = net.taps[tap] + 1

    def fn(r: Tensor) -> Tensor:
        logits, _ = net.forward(r, train=False, start=start)
        return ops.softmax_cross_entropy(logits, labels, reduction="sum")

    return fn


def channel_columns(shape: tuple, channels: Sequence[int]) -> list:
    """Flattened column indices of the given channels of a (C, H, W) block."""
    per = int(np.prod(shape[1:]))
    return [c * per + k for c in channels for k in range(per)]


def network_active_neurons(net: LayerStack, x: np.ndarray, y: np.ndarray, tau: float = 1e-6,
                           channels: Optional[Sequence[int]] = None, tap: str = TAP) -> ActiveNeurons:
    reps = tap_features(net, x, tap)
    cols = None if channels is None else channel_columns(reps.shape[1:], channels)
    return active_neurons(head_loss(net, y, tap), reps, tau, cols)


# --- sharpness ---------------------------------------------------------------


@dataclass
class SharpnessCurve:
    sigmas: list
    means: list
    stds: list
    draws: int

    def rows(self) -> list:
        return [{"sigma": s, "mean_loss": m, "std_loss": d} for s, m, d in zip(self.sigmas, self.means, self.stds)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sigma", "mean_loss", "std_loss"])
            w.writeheader()
            for r in self.rows():
                w.writerow({k: repr(float(v)) for k, v in r.items()})


def sharpness_probe(params: dict, loss_fn: Callable[[], float], sigmas: Sequence[float], draws: int = 8,
                    seed: int = 0) -> SharpnessCurve:
    """Mean/std of ``loss_fn()`` under isotropic Gaussian parameter noise of each scale.

    ``params`` maps names to Tensors that ``loss_fn`` reads; they are restored
    exactly afterwards.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or sigmas[0] != 0.0 or any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise InvalidConfig("sigmas must start at 0 and increase strictly")
    if draws < 1:
        raise InvalidConfig("need at least one draw per sigma")
    names = sorted(params)
    saved = {n: params[n].data.copy() for n in names}
    rng = np.random.default_rng(seed)
    means, stds = [], []
    try:
        for sigma in sigmas:
            if sigma == 0.0:
                means.append(float(loss_fn()))
                stds.append(0.0)
                continue
            vals = []
            for _ in range(draws):
                for n in names:
                    params[n].data[...] = saved[n] + sigma * rng.standard_normal(saved[n].shape)
                vals.append(float(loss_fn()))
            for n in names:
                params[n].data[...] = saved[n]
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals, ddof=1)) if draws > 1 else 0.0)
    finally:
        for n in names:
            params[n].data[...] = saved[n]
    return SharpnessCurve(sigmas, means, stds, draws)


def train_loss(net: LayerStack, x: np.ndarray, y: np.ndarray, batch_size: int = 250) -> Callable[[], float]:
    """Eval-mode mean cross-entropy of ``net`` over (x, y)."""

    def fn() -> float:
        total = 0.0
        with no_grad():
            for i in range(0, x.shape[0], batch_size):
                logits, _ = net.forward(Tensor(x[i : i + batch_size]), train=False)
                total += ops.softmax_cross_entropy(logits, y[i : i + batch_size], reduction="sum").item()
        return total / x.shape[0]

    return fn


def network_sharpness(net: LayerStack, x: np.ndarray, y: np.ndarray, sigmas: Sequence[float], draws: int = 8,
                      seed: int = 0) -> SharpnessCurve:
    return sharpness_probe(net.named_parameters(), train_loss(net, x, y), sigmas, draws, seed)


# --- reports and dumps -------------------------------------------------------


def analysis_report(net: LayerStack, split: SplitSpec, x: np.ndarray, y: np.ndarray, sigmas: Sequence[float],
                    draws: int = 8, seed: int = 0, tau: float = 1e-6, tap: str = TAP) -> tuple:
    """(JSON-ready report, SharpnessCurve) for one trained network."""
    report = {"tap": tap, "tau": tau}
    if split.inh_indices and split.exp_indices:
        report["cka_inh_exp"] = split_cka(net, split, x, tap)
    report["active_neurons"] = network_active_neurons(net, x, y, tau, tap=tap).count
    for part, chans in (("inh", split.inh_indices), ("exp", split.exp_indices)):
        if chans:
            try:
                report[f"active_neurons_{part}"] = network_active_neurons(net, x, y, tau, chans, tap).count
            except DegenerateGradient:
                report[f"active_neurons_{part}"] = 0
    curve = network_sharpness(net, x, y, sigmas, draws, seed)
    report["sharpness"] = curve.rows()
    return report, curve


def save_activations(path, features: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(features))


def load_activations(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
