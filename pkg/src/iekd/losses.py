"""Inheritance / exploration losses on factor tensors.

Every metric is written as a dissimilarity ``s(F, F_T) >= 0`` that is zero for
identical (normalized) factors. The inheritance loss minimizes ``s``; the
exploration loss is exactly ``-s``, so the two forms are bitwise negatives on
identical inputs. The teacher factor is always detached.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import DegenerateRepresentation, IndexOutOfRange, InvalidConfig, ShapeMismatch, ZeroNormFactor
from .tensor import Tensor


class MetricKind(str, enum.Enum):
    L1_NORMALIZED = "l1"
    L2 = "l2"
    COSINE = "cosine"
    PARTIAL_L2 = "partial_l2"
    L1_PLUS_CKA = "l1_cka"


# --- channel split -----------------------------------------------------------


def inheritance_count(eta: float, channels: int) -> int:
    """round(eta * C) with halves rounded up."""
    return int(np.floor(eta * channels + 0.5))


@dataclass(frozen=True)
class SplitSpec:
    eta: float
    channels: int
    seed: int
    inh_indices: tuple = field(default=())
    exp_indices: tuple = field(default=())

    @classmethod
    def random(cls, eta: float, channels: int, seed: int) -> "SplitSpec":
        if not 0.0 <= eta <= 1.0:
            raise InvalidConfig(f"eta must lie in [0, 1], got {eta}")
        perm = np.random.default_rng(seed).permutation(channels)
        n_inh = inheritance_count(eta, channels)
        inh = tuple(sorted(int(i) for i in perm[:n_inh]))
        exp = tuple(sorted(int(i) for i in perm[n_inh:]))
        return cls(eta, channels, seed, inh, exp)

    def validate(self) -> None:
        both = set(self.inh_indices) | set(self.exp_indices)
        if len(both) != len(self.inh_indices) + len(self.exp_indices):
            raise InvalidConfig("inheritance and exploration index sets overlap")
        if both != set(range(self.channels)):
            raise IndexOutOfRange(f"split indices do not cover 0..{self.channels - 1}")

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "channels": self.channels,
            "seed": self.seed,
            "inh_indices": list(self.inh_indices),
            "exp_indices": list(self.exp_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        spec = cls(d["eta"], d["channels"], d["seed"], tuple(d["inh_indices"]), tuple(d["exp_indices"]))
        spec.validate()
        return spec


def split_channels(features: Tensor, spec: SplitSpec) -> tuple:
    """Gather the inheritance and exploration channel blocks (``None`` if empty)."""
    c = features.shape[1]
    if spec.channels != c:
        raise IndexOutOfRange(f"split made for {spec.channels} channels, features have {c}")
    spec.validate()
    f_inh = ops.take(features, spec.inh_indices, axis=1) if spec.inh_indices else None
    f_exp = ops.take(features, spec.exp_indices, axis=1) if spec.exp_indices else None
    return f_inh, f_exp


def merge_channels(f_inh: Optional[np.ndarray], f_exp: Optional[np.ndarray], spec: SplitSpec) -> np.ndarray:
    """Inverse of :func:`split_channels` on raw arrays."""
    ref = f_inh if f_inh is not None else f_exp
    out = np.empty((ref.shape[0], spec.channels) + ref.shape[2:])
    if f_inh is not None:
        out[:, list(spec.inh_indices)] = f_inh
    if f_exp is not None:
        out[:, list(spec.exp_indices)] = f_exp
    return out


# --- helpers -----------------------------------------------------------------


def _rows(f: Tensor) -> Tensor:
    return ops.reshape(f, (f.shape[0], -1)) if f.ndim != 2 else f


def normalize_rows(x: Tensor, eps: Optional[float] = None) -> Tensor:
    n, d = x.shape
    norms = ops.l2_norm(x, axes=1)
    if eps is None:
        if np.any(norms.data == 0):
            raise ZeroNormFactor("factor with zero L2 norm; pass eps to guard")
    else:
        norms = ops.add(norms, eps)
    return ops.div(x, ops.broadcast_to(ops.reshape(norms, (n, 1)), (n, d)))


def centered_gram(x: Tensor) -> Tensor:
    n = x.shape[0]
    h = Tensor(np.eye(n) - np.full((n, n), 1.0 / n))
    xc = ops.matmul(h, x)
    return ops.matmul(xc, ops.transpose(xc))


def linear_cka_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Differentiable linear CKA between row-aligned ``x`` and ``y`` (Gram form)."""
    x, y = _rows(x), _rows(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch("CKA needs the same number of rows")
    kx, ky = centered_gram(x), centered_gram(y)
    if not np.any(kx.data) or not np.any(ky.data):
        raise DegenerateRepresentation("representation is zero after centering")
    num = ops.sum(ops.mul(kx, ky))
    den = ops.mul(ops.l2_norm(kx), ops.l2_norm(ky))
    return ops.div(num, den)


def _check_pair(f: Tensor, ft: Tensor) -> None:
    if f.shape != ft.shape:
        raise ShapeMismatch(f"factor shapes differ: {f.shape} vs {ft.shape}")


REDUCTIONS = ("norm", "element")


def dissimilarity(f: Tensor, f_t: Tensor, metric: MetricKind = MetricKind.L1_NORMALIZED, eps: Optional[float] = None,
                  reduction: str = "norm") -> Tensor:
    """Batch-mean dissimilarity between student factor ``f`` and teacher factor ``f_t``.

    ``reduction="element"`` reports the distance per coordinate: mean absolute
    difference for L1, root-mean-square difference for the L2 forms.
    """
    metric = MetricKind(metric)
    if reduction not in REDUCTIONS:
        raise InvalidConfig(f"reduction must be one of {REDUCTIONS}")
    _check_pair(f, f_t)
    f_t = f_t.detach()
    a, b = normalize_rows(_rows(f), eps), normalize_rows(_rows(f_t), eps)
    if metric in (MetricKind.L1_NORMALIZED, MetricKind.L1_PLUS_CKA):
        per = ops.l1_norm(ops.sub(a, b), axes=1)
    elif metric is MetricKind.L2:
        per = ops.l2_norm(ops.sub(a, b), axes=1)
    elif metric is MetricKind.COSINE:
        per = ops.sub(1.0, ops.sum(ops.mul(a, b), axes=1))
    elif metric is MetricKind.PARTIAL_L2:
        per = ops.l2_norm(ops.sub(ops.relu(a), ops.relu(b)), axes=1)
    else:  # pragma: no cover
        raise ValueError(metric)
    if reduction == "element":
        d = a.shape[1]
        if metric in (MetricKind.L1_NORMALIZED, MetricKind.L1_PLUS_CKA):
            per = ops.scale(per, 1.0 / d)
        elif metric in (MetricKind.L2, MetricKind.PARTIAL_L2):
            per = ops.scale(per, 1.0 / np.sqrt(d))
    out = ops.mean(per)
    if metric is MetricKind.L1_PLUS_CKA:
        out = ops.add(out, ops.sub(1.0, linear_cka_tensor(_rows(f), _rows(f_t))))
    return out


def inheritance_loss(f_inh: Tensor, f_t: Tensor, metric: MetricKind = MetricKind.L1_NORMALIZED, eps: Optional[float] = None,
                     reduction: str = "norm") -> Tensor:
    return dissimilarity(f_inh, f_t, metric, eps, reduction)


def exploration_loss(f_exp: Tensor, f_t: Tensor, metric: MetricKind = MetricKind.L1_NORMALIZED, eps: Optional[float] = None,
                     reduction: str = "norm") -> Tensor:
    return ops.neg(dissimilarity(f_exp, f_t, metric, eps, reduction))


def ieod_losses(f_inh: Tensor, f_exp: Tensor, f_t: Tensor, reference: Optional[Tensor] = None) -> tuple:
    """Rectified L2 inheritance/exploration pair used by the OD-style variant.

    ``reference`` replaces the teacher factor as the rectified target; passing
    the student's own factor reproduces the formula as literally printed.
    """
    target = (f_t if reference is None else reference).detach()
    _check_pair(f_inh, target)
    _check_pair(f_exp, target)
    rt = ops.relu(_rows(target))

    def dist(f):
        return ops.mean(ops.l2_norm(ops.sub(ops.relu(_rows(f)), rt), axes=1))

    return dist(f_inh), ops.neg(dist(f_exp))


def attention_loss_pair(f_inh: Tensor, f_exp: Tensor, f_t: Tensor) -> tuple:
    """Inheritance/exploration on spatial attention maps of the factors (AT-style)."""
    from .nets import attention_map

    a_t = attention_map(f_t.detach())
    return (
        inheritance_loss(attention_map(f_inh), a_t),
        exploration_loss(attention_map(f_exp), a_t),
    )


def total_student_loss(goal: Tensor, inh, exp, lambda_inh: float, lambda_exp: float) -> Tensor:
    """goal + lambda_inh * inh + lambda_exp * exp; ``None`` terms contribute nothing."""
    total = goal
    if inh is not None:
        total = ops.add(total, ops.scale(inh, lambda_inh))
    if exp is not None:
        total = ops.add(total, ops.scale(exp, lambda_exp))
    return total
