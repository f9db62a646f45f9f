"""Small reference conv nets standing in for the teacher/student pairs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import InvalidConfig, ZeroFeatureBlock
from .nn import AvgPool2, BatchNorm, Conv3x3, Dense, GlobalAvgPool, LayerStack, LeakyReLU
from .tensor import Tensor

TAP = "feat"


@dataclass
class NetConfig:
    depth: int = 4
    channels: int = 16
    num_classes: int = 3
    in_channels: int = 1
    image_size: int = 16
    pool_after: tuple = ()
    tap_block: int = -1  # conv block whose post-activation output is tapped
    slope: float = ops.LEAKY_SLOPE
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1 or self.channels < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise InvalidConfig(f"invalid network config {self}")
        if not -self.depth <= self.tap_block < self.depth:
            raise InvalidConfig(f"tap_block {self.tap_block} outside 0..{self.depth - 1}")
        size = self.image_size
        for b in sorted(self.pool_after):
            if not 0 <= b < self.depth:
                raise InvalidConfig(f"pool_after index {b} outside 0..{self.depth - 1}")
            if size % 2:
                raise InvalidConfig("pooling needs even spatial extents")
            size //= 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_after"] = list(self.pool_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["pool_after"] = tuple(d.get("pool_after", ()))
        return cls(**d)


def build_net(cfg: NetConfig, name: str = "net") -> LayerStack:
    """conv3x3-BN-leakyReLU blocks, optional 2x2 pooling, global pool, dense head."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    tap_block = cfg.tap_block % cfg.depth
    layers, taps = [], {}
    cin = cfg.in_channels
    for b in range(cfg.depth):
        layers += [Conv3x3(cin, cfg.channels, rng, cfg.slope), BatchNorm(cfg.channels), LeakyReLU(cfg.slope)]
        if b == tap_block:
            taps[TAP] = len(layers) - 1
        if b in cfg.pool_after:
            layers.append(AvgPool2())
        cin = cfg.channels
    layers += [GlobalAvgPool(), Dense(cfg.channels, cfg.num_classes, rng)]
    shape = (cfg.in_channels, cfg.image_size, cfg.image_size)
    return LayerStack(layers, shape, taps, name=name)


@dataclass
class PairConfig:
    teacher: NetConfig = field(default_factory=lambda: NetConfig(depth=4, channels=32, pool_after=(0,)))
    student: NetConfig = field(default_factory=lambda: NetConfig(depth=3, channels=16, pool_after=(0,), seed=1))

    def to_dict(self) -> dict:
        return {"teacher": self.teacher.to_dict(), "student": self.student.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PairConfig":
        return cls(NetConfig.from_dict(d["teacher"]), NetConfig.from_dict(d["student"]))


def build_reference_nets(config: PairConfig) -> tuple:
    t, s = config.teacher, config.student
    if (t.num_classes, t.in_channels, t.image_size) != (s.num_classes, s.in_channels, s.image_size):
        raise InvalidConfig("teacher and student must share input shape and class count")
    teacher, student = build_net(t, "teacher"), build_net(s, "student")
    if teacher.tap_shape(TAP)[1:] != student.tap_shape(TAP)[1:]:
        raise InvalidConfig(
            f"tapped blocks differ spatially: {teacher.tap_shape(TAP)} vs {student.tap_shape(TAP)}"
        )
    return teacher, student


def attention_map(features: Tensor, p: int = 2) -> Tensor:
    """Per-sample spatial attention sum_c |F_c|^p, flattened and L2-normalized."""
    if features.ndim != 4:
        raise ValueError(f"attention_map expects N x C x H x W, got {features.shape}")
    n, c, h, w = features.shape
    if p == 2:
        powered = ops.mul(features, features)
    else:
        mag = ops.abs(features)
        powered = mag
        for _ in range(p - 1):
            powered = ops.mul(powered, mag)
    amap = ops.reshape(ops.sum(powered, axes=1), (n, h * w))
    norms = ops.l2_norm(amap, axes=1)
    if np.any(norms.data == 0):
        raise ZeroFeatureBlock("all-zero feature block has no attention map")
    return ops.div(amap, ops.broadcast_to(ops.reshape(norms, (n, 1)), (n, h * w)))
