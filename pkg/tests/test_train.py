import numpy as np
import pytest

from iekd.codec import FactorCodec
from iekd.data import generate_synthetic
from iekd.errors import AlternationViolation, ConfigMismatch, InvalidConfig
from iekd.nets import NetConfig, build_net
from iekd.nn import state_hash
from iekd.train import (
    DistillConfig,
    _Peer,
    _iedml_half_step,
    _optimizer,
    _student_encoders,
    distill_iekd,
    run_ablation,
    train_codec,
    train_iedml,
    train_supervised,
)
from iekd.losses import SplitSpec
from iekd.tensor import Tensor

TEACHER = NetConfig(depth=2, channels=8, pool_after=(0,), seed=0)
STUDENT = NetConfig(depth=2, channels=4, pool_after=(0,), seed=1)


@pytest.fixture(scope="module")
def small():
    ds = generate_synthetic("blobs-img", 7, 240, 120)
    teacher = build_net(TEACHER, "teacher")
    train_supervised(teacher, ds, DistillConfig(epochs=3, schedule=[[2, 0.1]]))
    codec, _ = train_codec(teacher, ds, epochs=3)
    return ds, teacher, codec


def cfg(**kw):
    base = dict(epochs=3, schedule=[[1, 0.1], [2, 0.1]], batch_size=32)
    base.update(kw)
    return DistillConfig(**base)


def test_config_validation_and_round_trip():
    c = cfg(eta=0.3, metric="cosine")
    assert DistillConfig.from_dict(c.to_dict()) == c
    for bad in (dict(eta=1.5), dict(lambda_inh=-1), dict(epochs=0), dict(metric="nope"), dict(variant="x")):
        with pytest.raises((InvalidConfig, ValueError)):
            cfg(**bad).validate()
    with pytest.raises(InvalidConfig):
        DistillConfig.from_dict({"etaa": 0.5})


def test_supervised_descends_deterministic_and_schedules(small):
    ds = small[0]
    runs = [train_supervised(build_net(STUDENT, "student"), ds, cfg()) for _ in range(2)]
    assert runs[0].metrics_hash() == runs[1].metrics_hash()
    e = runs[0].epochs
    assert e[-1]["goal"] < e[0]["goal"]
    assert [r["lr"] for r in e] == [0.1, 0.1 * 0.1, 0.1 * 0.1 * 0.1]


def test_lambda_zero_is_bit_identical_to_independent(small):
    ds, teacher, codec = small
    c = cfg(lambda_inh=0.0, lambda_exp=0.0)
    ind = train_supervised(build_net(STUDENT, "student"), ds, c, "independent")
    r = distill_iekd(teacher, codec, build_net(STUDENT, "student"), ds, c)
    for a, b in zip(ind.epochs, r.manifest.epochs):
        assert all(a[k] == b[k] for k in a)
    assert ind.params["student"] == r.manifest.params["student"]


def test_distill_freezes_teacher_and_codec_and_decomposes(small):
    ds, teacher, codec = small
    before = state_hash(teacher, *codec.stacks, include_buffers=True)
    c = cfg()
    r = distill_iekd(teacher, codec, build_net(STUDENT, "student"), ds, c)
    assert state_hash(teacher, *codec.stacks, include_buffers=True) == before
    assert r.manifest.analysis["frozen_ok"] is True
    for e in r.manifest.epochs:
        assert abs(e["total"] - (e["goal"] + c.lambda_inh * e["inh"] + c.lambda_exp * e["exp"])) < 1e-10


def test_distill_loss_directions(small):
    ds, teacher, codec = small
    e = distill_iekd(teacher, codec, build_net(STUDENT, "student"), ds, cfg(epochs=5, schedule=[[3, 0.1]])).manifest.epochs
    inh_down = sum(b["inh"] < a["inh"] for a, b in zip(e, e[1:]))
    exp_up = sum(abs(b["exp"]) > abs(a["exp"]) for a, b in zip(e, e[1:]))
    assert inh_down > (len(e) - 1) / 2 and exp_up > (len(e) - 1) / 2


@pytest.mark.parametrize("variant,metric", [("at", "l1"), ("od", "l1"), ("ft", "cosine"), ("ft", "l1_cka")])
def test_variants_run(small, variant, metric):
    ds, teacher, codec = small
    r = distill_iekd(teacher, codec, build_net(STUDENT, "student"), ds, cfg(epochs=1, variant=variant, metric=metric))
    assert np.isfinite(r.manifest.epochs[-1]["total"])


@pytest.mark.parametrize("eta", [0.0, 1.0])
def test_extreme_splits_have_one_part(small, eta):
    ds, teacher, codec = small
    r = distill_iekd(teacher, codec, build_net(STUDENT, "student"), ds, cfg(epochs=1, eta=eta))
    assert (r.enc_inh is None) == (eta == 0.0) and (r.enc_exp is None) == (eta == 1.0)
    assert r.manifest.epochs[0]["inh" if eta == 0.0 else "exp"] == 0.0


def test_codec_mismatch(small):
    ds, teacher, _ = small
    with pytest.raises(ConfigMismatch):
        distill_iekd(teacher, FactorCodec(16, (8, 8)), build_net(STUDENT, "student"), ds, cfg(epochs=1))
    wrong = build_net(NetConfig(depth=2, channels=4, pool_after=()), "student")
    with pytest.raises(ConfigMismatch):
        distill_iekd(teacher, small[2], wrong, ds, cfg(epochs=1))


def _iedml_pair(seed=0):
    n1 = build_net(NetConfig(depth=2, channels=4, pool_after=(0,), seed=seed), "net1")
    n2 = build_net(NetConfig(depth=2, channels=4, pool_after=(0,), seed=seed + 1), "net2")
    return n1, n2, FactorCodec(4, (8, 8), seed=seed, name="codec1"), FactorCodec(4, (8, 8), seed=seed + 1, name="codec2")


def test_iedml_alternation_hashes_and_determinism(small):
    ds = small[0]
    c = cfg(epochs=2, schedule=[[1, 0.1]])
    a = train_iedml(*_iedml_pair(), ds, c)
    b = train_iedml(*_iedml_pair(), ds, c)
    assert a.manifest.metrics_hash() == b.manifest.metrics_hash()
    batches = int(np.ceil(ds.x_train.shape[0] / c.batch_size))
    assert a.manifest.epochs[-1]["hash_checks"] == 2 * 2 * batches


def test_iedml_detects_shared_parameters(small):
    ds = small[0]
    n1, n2, c1, c2 = _iedml_pair()
    n2.layers[0].params["weight"] = n1.layers[0].params["weight"]  # peer aliasing breaks the freeze
    c = cfg(epochs=1)
    peers = []
    for net, codec, other in ((n1, c1, c2), (n2, c2, c1)):
        split = SplitSpec.random(0.5, 4, 0)
        p = _Peer(net, codec, split, *_student_encoders(split, other.factor_channels, (8, 8), 0, net.name + "."))
        params = dict(net.named_parameters())
        params.update(codec.parameters())
        p.opt = _optimizer(params, c)
        peers.append(p)
    with pytest.raises(AlternationViolation):
        _iedml_half_step(peers[0], peers[1], Tensor(ds.x_train[:16]), ds.y_train[:16], c)


def test_iedml_spatial_mismatch(small):
    n1, _, c1, _ = _iedml_pair()
    n2 = build_net(NetConfig(depth=2, channels=4, pool_after=(), seed=3), "net2")
    with pytest.raises(ConfigMismatch):
        train_iedml(n1, n2, c1, FactorCodec(4, (16, 16), name="codec2"), small[0], cfg(epochs=1))


def test_ablation_rows(small):
    ds, teacher, codec = small

    def runner(overrides, seed):
        c = cfg(epochs=1, seed_data=seed, seed_init=seed, seed_split=seed).replace(**overrides)
        return distill_iekd(teacher, codec, build_net(STUDENT, "student"), ds, c).manifest

    grid = [{"eta": 0.0}, {"eta": 0.5}, {"eta": 1.0}]
    manifests, rows = run_ablation(grid, [0, 1], runner)
    assert len(rows) == len(grid) * 2 == len(manifests)
    assert [r["eta"] for r in rows] == [0.0, 0.0, 0.5, 0.5, 1.0, 1.0]
