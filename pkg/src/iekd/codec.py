"""Paraphraser auto-encoder producing compact factors of a feature block.

Encoder: Conv1 C->C, Conv2 C->C/k, Conv3 C/k->C/k.
Decoder: Deconv1 C/k->C/k, Deconv2 C/k->C, Deconv3 C->C.
Every layer is 3x3 / stride 1 / pad 1 and followed by batch norm and a 0.1
leaky ReLU, so spatial extents never change. The factor is the Conv3 output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ChannelNotDivisible, NumericFailure, ShapeMismatch
from .nn import BatchNorm, ConvTranspose3x3, Conv3x3, LayerStack, LeakyReLU
from .optim import SGD
from .tensor import Tensor, backward, no_grad, recording

DEFAULT_RATIO = 2


def _block(layer, channels, slope):
    return [layer, BatchNorm(channels), LeakyReLU(slope)]


def build_encoder(in_channels: int, factor_channels: int, spatial: tuple, rng: np.random.Generator,
                  name: str = "encoder", slope: float = ops.LEAKY_SLOPE) -> LayerStack:
    layers = (
        _block(Conv3x3(in_channels, in_channels, rng, slope), in_channels, slope)
        + _block(Conv3x3(in_channels, factor_channels, rng, slope), factor_channels, slope)
        + _block(Conv3x3(factor_channels, factor_channels, rng, slope), factor_channels, slope)
    )
    return LayerStack(layers, (in_channels,) + tuple(spatial), name=name)


def build_decoder(factor_channels: int, out_channels: int, spatial: tuple, rng: np.random.Generator,
                  name: str = "decoder", slope: float = ops.LEAKY_SLOPE) -> LayerStack:
    layers = (
        _block(ConvTranspose3x3(factor_channels, factor_channels, rng, slope), factor_channels, slope)
        + _block(ConvTranspose3x3(factor_channels, out_channels, rng, slope), out_channels, slope)
        + _block(ConvTranspose3x3(out_channels, out_channels, rng, slope), out_channels, slope)
    )
    return LayerStack(layers, (factor_channels,) + tuple(spatial), name=name)


def _zero_weights(stack: LayerStack) -> None:
    for name, p in stack.named_parameters().items():
        if name.endswith("weight"):
            p.data[...] = 0.0


class FactorCodec:
    def __init__(self, channels: int, spatial: tuple, ratio: int = DEFAULT_RATIO, seed: int = 0,
                 zero_init: bool = False, name: str = "codec"):
        if ratio < 1 or channels % ratio:
            raise ChannelNotDivisible(f"{channels} channels not divisible by ratio {ratio}")
        self.channels, self.ratio, self.spatial = channels, ratio, tuple(spatial)
        self.factor_channels = channels // ratio
        self.name = name
        rng = np.random.default_rng(seed)
        self.encoder = build_encoder(channels, self.factor_channels, spatial, rng, f"{name}.encoder")
        self.decoder = build_decoder(self.factor_channels, channels, spatial, rng, f"{name}.decoder")
        if zero_init:
            _zero_weights(self.encoder)
            _zero_weights(self.decoder)

    @property
    def stacks(self) -> tuple:
        return (self.encoder, self.decoder)

    def parameters(self) -> dict:
        out = {}
        for s in self.stacks:
            out.update({f"{s.name}/{k}": p for k, p in s.named_parameters().items()})
        return out

    def describe(self) -> dict:
        return {"channels": self.channels, "ratio": self.ratio, "spatial": list(self.spatial)}

    def _check(self, features: Tensor) -> None:
        if features.ndim != 4:
            raise ShapeMismatch(f"codec input must be N x C x H x W, got {features.shape}")
        if features.shape[1] % self.ratio:
            raise ChannelNotDivisible(f"{features.shape[1]} channels not divisible by ratio {self.ratio}")
        if tuple(features.shape[1:]) != (self.channels,) + self.spatial:
            raise ShapeMismatch(f"codec built for {(self.channels,) + self.spatial}, got {features.shape[1:]}")

    def encode(self, features: Tensor, train: bool = False, update_stats: bool = True) -> Tensor:
        self._check(features)
        return self.encoder.forward(features, train, update_stats)[0]

    def decode(self, factor: Tensor, train: bool = False, update_stats: bool = True) -> Tensor:
        return self.decoder.forward(factor, train, update_stats)[0]

    def reconstruct(self, features: Tensor, train: bool = False, update_stats: bool = True) -> Tensor:
        return self.decode(self.encode(features, train, update_stats), train, update_stats)


def encode(codec: FactorCodec, features: Tensor, train: bool = False) -> Tensor:
    return codec.encode(features, train)


def squared_error(features: Tensor, recon: Tensor, reduction: str = "mean") -> Tensor:
    """Squared reconstruction error; ``mean`` averages over every element, ``sum`` sums within a sample."""
    diff = ops.sub(recon, features.detach())
    denom = features.size if reduction == "mean" else features.shape[0]
    return ops.scale(ops.sum(ops.mul(diff, diff)), 1.0 / denom)


def reconstruction_loss(codec: FactorCodec, features: Tensor, train: bool = True, update_stats: bool = True,
                        reduction: str = "mean") -> Tensor:
    return squared_error(features, codec.reconstruct(features, train, update_stats), reduction)


class FactorEncoder:
    """Encoder-only half used on the student side (trained jointly with it)."""

    def __init__(self, in_channels: int, factor_channels: int, spatial: tuple, seed: int = 0, name: str = "enc"):
        self.in_channels, self.factor_channels = in_channels, factor_channels
        self.stack = build_encoder(in_channels, factor_channels, spatial, np.random.default_rng(seed), name)
        self.name = name

    @property
    def stacks(self) -> tuple:
        return (self.stack,)

    def parameters(self) -> dict:
        return {f"{self.name}/{k}": p for k, p in self.stack.named_parameters().items()}

    def __call__(self, x: Tensor, train: bool = True, update_stats: bool = True) -> Tensor:
        return self.stack.forward(x, train, update_stats)[0]


def eval_rec_loss(codec: FactorCodec, features: np.ndarray, batch_size: int) -> float:
    """Deterministic L_rec over fixed chunks using batch statistics, no buffer update."""
    total, n = 0.0, features.shape[0]
    with no_grad():
        for i in range(0, n, batch_size):
            chunk = Tensor(features[i : i + batch_size])
            loss = reconstruction_loss(codec, chunk, train=True, update_stats=False)
            total += loss.item() * chunk.shape[0]
    return total / n


@dataclass
class PretrainResult:
    codec: FactorCodec
    curve: list  # L_rec before training, then after each epoch
    lrs: list


def pretrain_codec(codec: FactorCodec, features: np.ndarray, epochs: int = 30, lr: float = 0.1,
                   batch_size: int = 64, seed: int = 0, momentum: float = 0.9,
                   schedule: Optional[list] = None) -> PretrainResult:
    """SGD on L_rec over precomputed (frozen-teacher) features.

    ``schedule`` defaults to x0.1 drops at 50% and 75% of ``epochs``.
    """
    if schedule is None:
        schedule = [(epochs // 2, 0.1), ((3 * epochs) // 4, 0.1)]
    opt = SGD(codec.parameters(), lr=lr, momentum=momentum, nesterov=True, schedule=schedule)
    rng = np.random.default_rng(seed)
    n = features.shape[0]
    curve = [eval_rec_loss(codec, features, batch_size)]
    lrs = []
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        lrs.append(opt.lr)
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            if idx.size < 2:
                continue
            opt.zero_grad()
            with recording():
                loss = reconstruction_loss(codec, Tensor(features[idx]), train=True)
                backward(loss)
            if not np.isfinite(loss.item()):
                raise NumericFailure(f"non-finite L_rec at epoch {epoch}")
            opt.step()
        curve.append(eval_rec_loss(codec, features, batch_size))
    return PretrainResult(codec, curve, lrs)
