"""Training pipelines: supervised, codec pretraining, IE-KD distillation, IE-DML.

Every pipeline returns a :class:`~iekd.manifest.RunManifest` whose metrics
are a pure function of (config, seeds, dataset): re-running reproduces them
bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import ops
from .codec import FactorCodec, FactorEncoder, pretrain_codec, reconstruction_loss
from .data import Dataset
from .errors import AlternationViolation, ConfigMismatch, InvalidConfig, NumericFailure
from .losses import (
    REDUCTIONS,
    MetricKind,
    SplitSpec,
    exploration_loss,
    inheritance_loss,
    split_channels,
    total_student_loss,
)
from .manifest import RunManifest
from .nets import TAP, attention_map
from .nn import LayerStack, params_of, state_hash
from .optim import SGD
from .tensor import Tensor, backward, no_grad, recording

VARIANTS = ("ft", "at", "od")


@dataclass
class DistillConfig:
    metric: str = MetricKind.L1_NORMALIZED.value
    variant: str = "ft"
    eta: float = 0.5
    lambda_inh: float = 50.0
    lambda_exp: float = 50.0
    lambda_rec: float = 0.8
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    schedule: list = field(default_factory=lambda: [[20, 0.1], [30, 0.1]])
    weight_decay: float = 0.0
    seed_data: int = 0
    seed_init: int = 0
    seed_split: int = 0
    tap: str = TAP
    ratio: int = 2
    norm_eps: Optional[float] = None
    reduction: str = "element"
    check_alternation: bool = True

    def validate(self) -> "DistillConfig":
        if self.lambda_inh < 0 or self.lambda_exp < 0 or self.lambda_rec < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidConfig(f"eta must lie in [0, 1], got {self.eta}")
        if self.epochs < 1 or self.batch_size < 2:
            raise InvalidConfig("need epochs >= 1 and batch_size >= 2")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.reduction not in REDUCTIONS:
            raise InvalidConfig(f"reduction must be one of {REDUCTIONS}")
        MetricKind(self.metric)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [[int(e), float(m)] for e, m in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        return cls(**d).validate()

    def replace(self, **kw) -> "DistillConfig":
        d = self.to_dict()
        d.update(kw)
        return DistillConfig.from_dict(d)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _optimizer(params: dict, cfg: DistillConfig) -> SGD:
    return SGD(params, lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov,
               schedule=[tuple(s) for s in cfg.schedule], weight_decay=cfg.weight_decay)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if idx.size >= 2:
            yield idx


def _guard(value: float, what: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise NumericFailure(f"non-finite {what} at epoch {epoch}")


def evaluate(net: LayerStack, x: np.ndarray, y: np.ndarray, batch_size: int = 250) -> tuple:
    """(error rate, mean cross-entropy) in eval mode."""
    wrong, loss = 0, 0.0
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            logits, _ = net.forward(Tensor(x[i : i + batch_size]), train=False)
            yb = y[i : i + batch_size]
            wrong += int((logits.data.argmax(axis=1) != yb).sum())
            loss += ops.softmax_cross_entropy(logits, yb, reduction="sum").item()
    return wrong / x.shape[0], loss / x.shape[0]


def features(net: LayerStack, x: np.ndarray, tap: str = TAP, batch_size: int = 250) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            _, taps = net.forward(Tensor(x[i : i + batch_size]), train=False)
            out.append(taps[tap].data)
    return np.concatenate(out)


def teacher_factors(teacher: LayerStack, codec: FactorCodec, x: np.ndarray, tap: str = TAP,
                    batch_size: int = 250) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            _, taps = teacher.forward(Tensor(x[i : i + batch_size]), train=False)
            out.append(codec.encode(taps[tap], train=False).data)
    return np.concatenate(out)


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, n: int, **values) -> None:
        self.count += n
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v * n

    def mean(self, k: str) -> float:
        return self.sums.get(k, 0.0) / self.count


# --- supervised --------------------------------------------------------------


def train_supervised(net: LayerStack, dataset: Dataset, cfg: DistillConfig, command: str = "train-teacher") -> RunManifest:
    cfg.validate()
    t0 = time.perf_counter()
    manifest = RunManifest(command, "supervised", cfg.to_dict(), dataset.identity())
    opt = _optimizer(params_of(net), cfg)
    rng = np.random.default_rng(cfg.seed_data)
    x, y = dataset.x_train, dataset.y_train
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        meter = _Meter()
        for idx in _batches(rng, x.shape[0], cfg.batch_size):
            opt.zero_grad()
            with recording():
                logits, _ = net.forward(Tensor(x[idx]), train=True)
                goal = ops.softmax_cross_entropy(logits, y[idx])
                total = goal
                backward(total)
            _guard(total.item(), "loss", epoch)
            opt.step()
            err = float((logits.data.argmax(axis=1) != y[idx]).mean())
            meter.add(idx.size, goal=goal.item(), total=total.item(), err=err)
        test_error, test_loss = evaluate(net, dataset.x_test, dataset.y_test)
        manifest.log_epoch({
            "epoch": epoch, "lr": opt.lr, "goal": meter.mean("goal"), "total": meter.mean("total"),
            "train_error": meter.mean("err"), "test_error": test_error, "test_loss": test_loss,
        })
    manifest.params[net.name] = state_hash(net)
    manifest.wall_clock = time.perf_counter() - t0
    return manifest


def train_teacher(net: LayerStack, dataset: Dataset, cfg: DistillConfig) -> RunManifest:
    return train_supervised(net, dataset, cfg, "train-teacher")


# --- codec pretraining -------------------------------------------------------


def train_codec(teacher: LayerStack, dataset: Dataset, epochs: int = 30, lr: float = 0.1, batch_size: int = 64,
                ratio: int = 2, seed: int = 0, tap: str = TAP) -> tuple:
    """Pretrain a paraphraser on the frozen teacher's tapped block; returns (codec, manifest)."""
    t0 = time.perf_counter()
    before = state_hash(teacher, include_buffers=True)
    feats = features(teacher, dataset.x_train, tap)
    codec = FactorCodec(feats.shape[1], feats.shape[2:], ratio=ratio, seed=seed)
    result = pretrain_codec(codec, feats, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
    config = {"epochs": epochs, "lr": lr, "batch_size": batch_size, "ratio": ratio, "seed": seed, "tap": tap}
    manifest = RunManifest("train-ae", "codec", config, dataset.identity())
    manifest.analysis["initial_rec"] = result.curve[0]
    for epoch, (lr_e, rec) in enumerate(zip(result.lrs, result.curve[1:])):
        manifest.log_epoch({"epoch": epoch, "lr": lr_e, "rec": rec})
    manifest.params["teacher"] = state_hash(teacher, include_buffers=True)
    manifest.analysis["teacher_frozen"] = manifest.params["teacher"] == before
    for s in codec.stacks:
        manifest.params[s.name] = state_hash(s)
    manifest.wall_clock = time.perf_counter() - t0
    return codec, manifest


# --- IE-KD -------------------------------------------------------------------


def _factor_losses(cfg: DistillConfig, F_inh, F_exp, F_T) -> tuple:
    """(L_inh, L_exp) for the configured variant; an absent part yields None."""
    metric, eps, red = MetricKind(cfg.metric), cfg.norm_eps, cfg.reduction
    if cfg.variant == "ft":
        inh = None if F_inh is None else inheritance_loss(F_inh, F_T, metric, eps, red)
        exp = None if F_exp is None else exploration_loss(F_exp, F_T, metric, eps, red)
    elif cfg.variant == "at":
        a_t = attention_map(F_T.detach())
        inh = None if F_inh is None else inheritance_loss(attention_map(F_inh), a_t, metric, eps, red)
        exp = None if F_exp is None else exploration_loss(attention_map(F_exp), a_t, metric, eps, red)
    else:
        rt = ops.relu(ops.reshape(F_T.detach(), (F_T.shape[0], -1)))
        per_coord = 1.0 / np.sqrt(rt.shape[1]) if red == "element" else 1.0

        def dist(f):
            rf = ops.relu(ops.reshape(f, (f.shape[0], -1)))
            return ops.scale(ops.mean(ops.l2_norm(ops.sub(rf, rt), axes=1)), per_coord)

        inh = None if F_inh is None else dist(F_inh)
        exp = None if F_exp is None else ops.neg(dist(F_exp))
    return inh, exp


def _student_encoders(split: SplitSpec, factor_channels: int, spatial: tuple, seed: int, prefix: str) -> tuple:
    enc_inh = enc_exp = None
    if split.inh_indices:
        enc_inh = FactorEncoder(len(split.inh_indices), factor_channels, spatial, derive_seed(seed, 1), f"{prefix}enc_inh")
    if split.exp_indices:
        enc_exp = FactorEncoder(len(split.exp_indices), factor_channels, spatial, derive_seed(seed, 2), f"{prefix}enc_exp")
    return enc_inh, enc_exp


def _encoder_params(*encs) -> dict:
    out = {}
    for e in encs:
        if e is not None:
            out.update(e.parameters())
    return out


@dataclass
class DistillResult:
    student: LayerStack
    split: SplitSpec
    enc_inh: Optional[FactorEncoder]
    enc_exp: Optional[FactorEncoder]
    manifest: RunManifest


def distill_iekd(teacher: LayerStack, codec: FactorCodec, student: LayerStack, dataset: Dataset,
                 cfg: DistillConfig) -> DistillResult:
    """Train ``student`` with L_goal + lambda_inh L_inh + lambda_exp L_exp against a frozen teacher/codec."""
    cfg.validate()
    t0 = time.perf_counter()
    t_shape, s_shape = teacher.tap_shape(cfg.tap), student.tap_shape(cfg.tap)
    if codec.channels != t_shape[0] or codec.spatial != tuple(t_shape[1:]):
        raise ConfigMismatch(f"codec built for {(codec.channels,) + codec.spatial}, teacher tap is {t_shape}")
    if tuple(s_shape[1:]) != codec.spatial:
        raise ConfigMismatch(f"student tap {s_shape} does not match teacher spatial extents {codec.spatial}")

    frozen_before = state_hash(teacher, *codec.stacks, include_buffers=True)
    F_T_all = teacher_factors(teacher, codec, dataset.x_train, cfg.tap)
    split = SplitSpec.random(cfg.eta, s_shape[0], cfg.seed_split)
    enc_inh, enc_exp = _student_encoders(split, codec.factor_channels, codec.spatial, cfg.seed_init, "")

    manifest = RunManifest("distill", "distill", cfg.to_dict(), dataset.identity())
    manifest.analysis["split"] = split.to_dict()
    params = params_of(student)
    params.update(_encoder_params(enc_inh, enc_exp))
    opt = _optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed_data)
    x, y = dataset.x_train, dataset.y_train
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        meter = _Meter()
        for idx in _batches(rng, x.shape[0], cfg.batch_size):
            opt.zero_grad()
            with recording():
                logits, taps = student.forward(Tensor(x[idx]), train=True)
                goal = ops.softmax_cross_entropy(logits, y[idx])
                f_inh, f_exp = split_channels(taps[cfg.tap], split)
                F_inh = None if enc_inh is None else enc_inh(f_inh)
                F_exp = None if enc_exp is None else enc_exp(f_exp)
                inh, exp = _factor_losses(cfg, F_inh, F_exp, Tensor(F_T_all[idx]))
                total = total_student_loss(goal, inh, exp, cfg.lambda_inh, cfg.lambda_exp)
                backward(total)
            _guard(total.item(), "loss", epoch)
            opt.step()
            err = float((logits.data.argmax(axis=1) != y[idx]).mean())
            meter.add(idx.size, goal=goal.item(), total=total.item(), err=err,
                      inh=0.0 if inh is None else inh.item(), exp=0.0 if exp is None else exp.item())
        test_error, test_loss = evaluate(student, dataset.x_test, dataset.y_test)
        manifest.log_epoch({
            "epoch": epoch, "lr": opt.lr, "goal": meter.mean("goal"), "inh": meter.mean("inh"),
            "exp": meter.mean("exp"), "total": meter.mean("total"), "train_error": meter.mean("err"),
            "test_error": test_error, "test_loss": test_loss,
        })
    manifest.params[student.name] = state_hash(student)
    for e in (enc_inh, enc_exp):
        if e is not None:
            manifest.params[e.name] = state_hash(e.stack)
    manifest.analysis["frozen_ok"] = state_hash(teacher, *codec.stacks, include_buffers=True) == frozen_before
    manifest.wall_clock = time.perf_counter() - t0
    return DistillResult(student, split, enc_inh, enc_exp, manifest)


# --- IE-DML ------------------------------------------------------------------


@dataclass
class _Peer:
    net: LayerStack
    codec: FactorCodec
    split: SplitSpec
    enc_inh: Optional[FactorEncoder]
    enc_exp: Optional[FactorEncoder]
    opt: SGD = None

    @property
    def stacks(self) -> tuple:
        encs = tuple(e.stack for e in (self.enc_inh, self.enc_exp) if e is not None)
        return (self.net,) + self.codec.stacks + encs

    def snapshot(self) -> str:
        return state_hash(*self.stacks)

    def factor(self, xb: Tensor, tap: str) -> Tensor:
        # peer factor as a constant; batch statistics, buffers untouched
        with no_grad():
            _, taps = self.net.forward(xb, train=True, update_stats=False)
            return self.codec.encode(taps[tap], train=True, update_stats=False)


def _iedml_half_step(me: _Peer, peer: _Peer, xb: Tensor, yb: np.ndarray, cfg: DistillConfig) -> dict:
    F_peer = peer.factor(xb, cfg.tap)
    peer_before = peer.snapshot() if cfg.check_alternation else None
    me.opt.zero_grad()
    with recording():
        logits, taps = me.net.forward(xb, train=True)
        f = taps[cfg.tap]
        goal = ops.softmax_cross_entropy(logits, yb)
        rec = reconstruction_loss(me.codec, f.detach(), train=True)
        f_inh, f_exp = split_channels(f, me.split)
        F_inh = None if me.enc_inh is None else me.enc_inh(f_inh)
        F_exp = None if me.enc_exp is None else me.enc_exp(f_exp)
        inh, exp = _factor_losses(cfg, F_inh, F_exp, F_peer)
        total = total_student_loss(ops.add(goal, ops.scale(rec, cfg.lambda_rec)), inh, exp,
                                   cfg.lambda_inh, cfg.lambda_exp)
        backward(total)
    if not np.isfinite(total.item()):
        raise NumericFailure("non-finite IE-DML loss")
    me.opt.step()
    if cfg.check_alternation and peer.snapshot() != peer_before:
        raise AlternationViolation("peer parameters changed during a half-step")
    return {
        "goal": goal.item(), "rec": rec.item(), "total": total.item(),
        "inh": 0.0 if inh is None else inh.item(), "exp": 0.0 if exp is None else exp.item(),
    }


@dataclass
class IEDMLResult:
    peers: tuple
    manifest: RunManifest


def train_iedml(net1: LayerStack, net2: LayerStack, codec1: FactorCodec, codec2: FactorCodec,
                dataset: Dataset, cfg: DistillConfig) -> IEDMLResult:
    """Alternating four-step mutual IE-KD.

    Per mini-batch: (a) forward both nets, (b) update net 1 (+ its codec and
    encoders) on L_theta1 with net 2's factor held constant, (c) re-forward both
    nets on the same batch, (d) update net 2 symmetrically.
    """
    cfg.validate()
    t0 = time.perf_counter()
    s1, s2 = net1.tap_shape(cfg.tap), net2.tap_shape(cfg.tap)
    for codec, shape in ((codec1, s1), (codec2, s2)):
        if codec.channels != shape[0] or codec.spatial != tuple(shape[1:]):
            raise ConfigMismatch(f"codec {(codec.channels,) + codec.spatial} does not match tap {shape}")
    if tuple(s1[1:]) != tuple(s2[1:]):
        raise ConfigMismatch(f"tapped blocks differ spatially: {s1} vs {s2}")

    peers = []
    for i, (net, codec, peer_codec) in enumerate(((net1, codec1, codec2), (net2, codec2, codec1))):
        shape = net.tap_shape(cfg.tap)
        split = SplitSpec.random(cfg.eta, shape[0], derive_seed(cfg.seed_split, i))
        encs = _student_encoders(split, peer_codec.factor_channels, codec.spatial, derive_seed(cfg.seed_init, i), f"{net.name}.")
        p = _Peer(net, codec, split, *encs)
        params = params_of(net)
        params.update(codec.parameters())
        params.update(_encoder_params(*encs))
        p.opt = _optimizer(params, cfg)
        peers.append(p)
    p1, p2 = peers

    manifest = RunManifest("iedml", "iedml", cfg.to_dict(), dataset.identity())
    manifest.analysis["splits"] = [p1.split.to_dict(), p2.split.to_dict()]
    rng = np.random.default_rng(cfg.seed_data)
    x, y = dataset.x_train, dataset.y_train
    checks = 0
    for epoch in range(cfg.epochs):
        p1.opt.set_epoch(epoch)
        p2.opt.set_epoch(epoch)
        m1, m2 = _Meter(), _Meter()
        for idx in _batches(rng, x.shape[0], cfg.batch_size):
            xb = Tensor(x[idx])
            m1.add(idx.size, **_iedml_half_step(p1, p2, xb, y[idx], cfg))  # steps (a) + (b)
            m2.add(idx.size, **_iedml_half_step(p2, p1, xb, y[idx], cfg))  # steps (c) + (d)
            if cfg.check_alternation:
                checks += 2
        row = {"epoch": epoch, "lr": p1.opt.lr, "hash_checks": checks}
        for tag, m, p in (("1", m1, p1), ("2", m2, p2)):
            row.update({f"{k}{tag}": m.mean(k) for k in ("goal", "rec", "inh", "exp", "total")})
            row[f"test_error{tag}"] = evaluate(p.net, dataset.x_test, dataset.y_test)[0]
        manifest.log_epoch(row)
    for p in peers:
        for s in p.stacks:
            manifest.params[s.name] = state_hash(s)
    manifest.wall_clock = time.perf_counter() - t0
    return IEDMLResult((p1, p2), manifest)


# --- ablation ----------------------------------------------------------------


def run_ablation(grid: list, seeds: list, runner: Callable[[dict, int], RunManifest]) -> tuple:
    """Run ``runner(overrides, seed)`` for every grid cell and seed.

    Returns ``(manifests, rows)`` with one summary row per (cell, seed).
    """
    manifests, rows = [], []
    for ci, overrides in enumerate(grid):
        for seed in seeds:
            m = runner(dict(overrides), seed)
            last = m.epochs[-1]
            cfg = m.config
            rows.append({
                "cell": ci,
                "eta": cfg.get("eta"),
                "metric": cfg.get("metric"),
                "lambda_inh": cfg.get("lambda_inh"),
                "lambda_exp": cfg.get("lambda_exp"),
                "seed": seed,
                "test_error": last["test_error"],
                "test_loss": last["test_loss"],
                "metrics_hash": m.metrics_hash(),
            })
            manifests.append(m)
    return manifests, rows
