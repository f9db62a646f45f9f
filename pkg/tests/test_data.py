import struct

import numpy as np
import pytest

from iekd import ops
from iekd.data import (
    generate_synthetic,
    load_csv,
    load_dataset_idx,
    load_idx,
    read_idx,
    save_dataset_idx,
    write_csv,
    write_idx,
)
from iekd.errors import InvalidRecipe, MalformedFile
from iekd.nn import Dense, LayerStack, LeakyReLU, params_of
from iekd.optim import SGD
from iekd.tensor import Tensor, backward, no_grad, recording


def test_blobs_deterministic():
    a = generate_synthetic("blobs-img", 7, 200, 100)
    b = generate_synthetic("blobs-img", 7, 200, 100)
    assert a.digest() == b.digest()
    assert a.x_train.shape == (200, 1, 16, 16) and a.x_train.dtype == np.float64
    assert generate_synthetic("blobs-img", 8, 200, 100).digest() != a.digest()


def test_blobs_full_size_deterministic():
    a = generate_synthetic("blobs-img", 7, 2000, 1000)
    assert a.digest() == generate_synthetic("blobs-img", 7, 2000, 1000).digest()
    assert a.x_test.shape == (1000, 1, 16, 16)


def test_blobs_labels_and_range():
    ds = generate_synthetic("blobs-img", 1, 300, 100)
    assert set(np.unique(ds.y_train)) == {0, 1, 2}
    assert ds.x_train.min() >= 0 and ds.x_train.max() <= 1


def test_blobs_class_means_differ():
    ds = generate_synthetic("blobs-img", 2, 600, 100)
    means = [ds.x_train[ds.y_train == k].mean(axis=0) for k in range(3)]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(means[i] - means[j]) > 0


def test_bad_recipes():
    with pytest.raises(InvalidRecipe):
        generate_synthetic("nope", 0, 10, 10)
    with pytest.raises(InvalidRecipe):
        generate_synthetic("spiral-2d", 0, 0, 10)
    with pytest.raises(InvalidRecipe):
        generate_synthetic("spiral-2d", 0, 10, 10, num_classes=1)


def _fit(layers, ds, epochs=300, lr=0.1):
    stack = LayerStack(layers, (2,))
    opt = SGD(params_of(stack), lr=lr, momentum=0.9)
    x, y = Tensor(ds.x_train), ds.y_train
    for _ in range(epochs):
        opt.zero_grad()
        with recording():
            out, _ = stack(x)
            backward(ops.softmax_cross_entropy(out, y))
        opt.step()
    with no_grad():
        out, _ = stack(Tensor(ds.x_test), train=False)
    return float((out.data.argmax(1) == ds.y_test).mean())


def test_spiral_needs_nonlinearity():
    ds = generate_synthetic("spiral-2d", 0, 600, 600)
    rng = np.random.default_rng(0)
    linear = _fit([Dense(2, 3, rng)], ds)
    deep = _fit([Dense(2, 64, rng), LeakyReLU(), Dense(64, 64, rng), LeakyReLU(), Dense(64, 3, rng)], ds, 1500)
    assert linear < 0.70
    assert deep > 0.90


def test_idx_hand_built_fixture(tmp_path):
    blob = bytes([0, 0, 0x08, 2]) + struct.pack(">II", 2, 2) + bytes([0, 255, 51, 102])
    (tmp_path / "img.idx").write_bytes(blob)
    arr = read_idx(tmp_path / "img.idx")
    assert arr.shape == (2, 2) and arr.tolist() == [[0, 255], [51, 102]]
    (tmp_path / "lab.idx").write_bytes(bytes([0, 0, 0x08, 1]) + struct.pack(">I", 2) + bytes([1, 0]))
    x, y = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    assert x.shape == (2, 2)
    np.testing.assert_allclose(x.reshape(2, 2), [[0, 1], [0.2, 0.4]])
    assert y.tolist() == [1, 0]


def test_idx_wrong_magic(tmp_path):
    (tmp_path / "bad.idx").write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 1, 7]))
    with pytest.raises(MalformedFile) as e:
        read_idx(tmp_path / "bad.idx")
    assert e.value.offset == 0
    (tmp_path / "short.idx").write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", 5) + bytes(3))
    with pytest.raises(MalformedFile) as e:
        read_idx(tmp_path / "short.idx")
    assert e.value.offset == 8


def test_idx_round_trip(tmp_path):
    ds = generate_synthetic("blobs-img", 3, 50, 20)
    save_dataset_idx(ds, tmp_path)
    back = load_dataset_idx(tmp_path)
    assert back.x_train.tobytes() == ds.x_train.tobytes()
    assert back.y_test.tobytes() == ds.y_test.tobytes()


def test_csv_round_trip_and_errors(tmp_path):
    ds = generate_synthetic("blobs-img", 4, 10, 5)
    write_csv(tmp_path / "d.csv", ds.x_train, ds.y_train)
    x, y = load_csv(tmp_path / "d.csv", (1, 16, 16))
    assert x.tobytes() == ds.x_train.tobytes() and (y == ds.y_train).all()
    (tmp_path / "h.csv").write_text("lbl,x0\n1,0.5\n")
    with pytest.raises(MalformedFile):
        load_csv(tmp_path / "h.csv")
    (tmp_path / "r.csv").write_text("label,x0,x1\n1,0.5,0.2\n0,abc,1\n")
    with pytest.raises(MalformedFile) as e:
        load_csv(tmp_path / "r.csv")
    assert e.value.offset == len("label,x0,x1\n1,0.5,0.2\n")


def test_csv_pixels_scaled(tmp_path):
    (tmp_path / "p.csv").write_text("label,x0,x1\n0,0,255\n1,51,102\n")
    x, _ = load_csv(tmp_path / "p.csv")
    np.testing.assert_allclose(x, [[0, 1], [0.2, 0.4]])
