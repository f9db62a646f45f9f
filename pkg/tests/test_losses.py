import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iekd.errors import InvalidConfig, ShapeMismatch, ZeroNormFactor
from iekd.losses import (
    MetricKind,
    SplitSpec,
    attention_loss_pair,
    dissimilarity,
    exploration_loss,
    ieod_losses,
    inheritance_count,
    inheritance_loss,
    linear_cka_tensor,
    merge_channels,
    split_channels,
    total_student_loss,
)
from iekd.analysis import linear_cka
from iekd.tensor import Tensor

factors = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).standard_normal((3, 2, 2, 2)))


def test_split_counts():
    assert inheritance_count(0.5, 32) == 16
    assert inheritance_count(0.5, 5) == 3  # halves round up
    s = SplitSpec.random(0.0, 8, 0)
    assert s.inh_indices == () and len(s.exp_indices) == 8
    s = SplitSpec.random(1.0, 8, 0)
    assert len(s.inh_indices) == 8 and s.exp_indices == ()
    with pytest.raises(InvalidConfig):
        SplitSpec.random(1.5, 8, 0)


def test_split_is_seeded_and_serializable():
    a, b = SplitSpec.random(0.3, 16, 4), SplitSpec.random(0.3, 16, 4)
    assert a == b and SplitSpec.from_dict(a.to_dict()) == a
    assert SplitSpec.random(0.3, 16, 5) != a


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(1, 12), st.integers(0, 1000))
def test_gather_scatter_round_trip(eta, c, seed):
    spec = SplitSpec.random(eta, c, seed)
    f = np.random.default_rng(seed).standard_normal((2, c, 2, 2))
    a, b = split_channels(Tensor(f), spec)
    back = merge_channels(None if a is None else a.data, None if b is None else b.data, spec)
    assert back.tobytes() == f.tobytes()


def test_hand_oracles():
    a, t = Tensor([[3.0, 4.0]]), Tensor([[0.0, 1.0]])
    assert inheritance_loss(a, t).item() == pytest.approx(0.8, abs=1e-15)
    assert exploration_loss(a, t).item() == pytest.approx(-0.8, abs=1e-15)
    assert inheritance_loss(a, a).item() == 0.0
    assert exploration_loss(a, a).item() == 0.0
    assert inheritance_loss(a, t, reduction="element").item() == pytest.approx(0.4, abs=1e-15)


def test_other_metric_oracles():
    a, t = Tensor([[3.0, 4.0]]), Tensor([[0.0, 1.0]])
    assert inheritance_loss(a, t, MetricKind.L2).item() == pytest.approx(np.hypot(0.6, 0.2), abs=1e-15)
    assert inheritance_loss(a, t, MetricKind.COSINE).item() == pytest.approx(0.2, abs=1e-15)
    b = Tensor([[3.0, -4.0]])
    assert inheritance_loss(b, t, MetricKind.PARTIAL_L2).item() == pytest.approx(np.hypot(0.6, 1.0), abs=1e-15)


def test_ieod_oracles():
    f, t = Tensor([[1.0, -1.0]]), Tensor([[1.0, 1.0]])
    inh, exp = ieod_losses(f, f, t)
    assert inh.item() == 1.0 and exp.item() == -1.0
    neg = Tensor([[-1.0, -2.0]])
    inh, exp = ieod_losses(neg, neg, Tensor([[-3.0, -0.5]]))
    assert inh.item() == 0.0 and exp.item() == 0.0
    inh, _ = ieod_losses(f, f, t, reference=f)
    assert inh.item() == 0.0


def test_zero_norm_factor():
    z, t = Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4)))
    with pytest.raises(ZeroNormFactor):
        inheritance_loss(z, t)
    assert np.isfinite(inheritance_loss(z, t, eps=1e-12).item())


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        inheritance_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_teacher_side_gets_no_gradient():
    from iekd.tensor import backward, recording

    f = Tensor(np.random.default_rng(0).standard_normal((2, 5)), requires_grad=True)
    t = Tensor(np.random.default_rng(1).standard_normal((2, 5)), requires_grad=True)
    with recording():
        backward(inheritance_loss(f, t))
    assert f.grad is not None and t.grad is None


def test_cka_tensor_agrees_with_feature_space_form():
    rng = np.random.default_rng(9)
    x, y = rng.standard_normal((20, 6)), rng.standard_normal((20, 4)) + 0.3 * rng.standard_normal((20, 1))
    assert linear_cka_tensor(Tensor(x), Tensor(y)).item() == pytest.approx(linear_cka(x, y), abs=1e-12)


def test_l1_plus_cka_composition():
    rng = np.random.default_rng(10)
    f, t = Tensor(rng.standard_normal((6, 5))), Tensor(rng.standard_normal((6, 5)))
    combined = dissimilarity(f, t, MetricKind.L1_PLUS_CKA).item()
    parts = dissimilarity(f, t).item() + 1.0 - linear_cka(f.data, t.data)
    assert combined == pytest.approx(parts, abs=1e-12)


def test_attention_pair_signs():
    rng = np.random.default_rng(11)
    f, t = Tensor(rng.standard_normal((2, 3, 2, 2))), Tensor(rng.standard_normal((2, 2, 2, 2)))
    inh, exp = attention_loss_pair(f, f, t)
    assert exp.item() == -inh.item() and inh.item() > 0


@settings(max_examples=50, deadline=None)
@given(factors, factors, st.sampled_from(list(MetricKind)))
def test_exploration_is_bitwise_negated_inheritance(f, t, metric):
    a = inheritance_loss(Tensor(f), Tensor(t), metric).data
    b = exploration_loss(Tensor(f), Tensor(t), metric).data
    assert (-a).tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(factors, factors, st.floats(0.01, 100), st.floats(0.01, 100), st.sampled_from(list(MetricKind)))
def test_scale_invariance(f, t, alpha, beta, metric):
    base = inheritance_loss(Tensor(f), Tensor(t), metric).item()
    scaled = inheritance_loss(Tensor(alpha * f), Tensor(beta * t), metric).item()
    assert abs(base - scaled) < 1e-12


@settings(max_examples=50, deadline=None)
@given(factors, factors)
def test_l1_bounds(f, t):
    d = f[0].size
    v = inheritance_loss(Tensor(f), Tensor(t)).item()
    assert 0.0 <= v <= 2.0 * np.sqrt(d)


def test_total_loss_decomposition():
    g, i, e = Tensor([0.7]), Tensor([0.2]), Tensor([-0.3])
    assert total_student_loss(g, i, e, 0.0, 0.0).item() == 0.7
    v = total_student_loss(g, i, e, 50.0, 50.0).item()
    assert v == pytest.approx(0.7 + 50 * 0.2 - 50 * 0.3, abs=1e-12)
    assert total_student_loss(g, None, e, 50.0, 50.0).item() == pytest.approx(0.7 - 15.0, abs=1e-12)
