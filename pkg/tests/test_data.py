import gzip

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tagi.data import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    DataFormatError,
    Dataset,
    Standardizer,
    encode_idx,
    load_csv,
    load_idx,
    one_hot,
    parse_idx,
    subset,
    toy_cubic,
    train_test_split,
)


@given(arrays(np.uint8, st.tuples(st.integers(0, 5), st.integers(1, 4), st.integers(1, 4))))
def test_idx_roundtrip(a):
    assert np.array_equal(parse_idx(encode_idx(a), IMAGE_MAGIC), a)


def test_idx_errors():
    raw = encode_idx(np.zeros((2, 3, 3), np.uint8))
    with pytest.raises(DataFormatError, match="magic"):
        parse_idx(raw, LABEL_MAGIC)
    with pytest.raises(DataFormatError):
        parse_idx(raw[:-1], IMAGE_MAGIC)
    with pytest.raises(DataFormatError):
        parse_idx(raw[:6], IMAGE_MAGIC)


def _write_idx(tmp_path, images, labels, zipped=True):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    wrap = gzip.compress if zipped else (lambda b: b)
    ip.write_bytes(wrap(encode_idx(images)))
    lp.write_bytes(wrap(encode_idx(labels)))
    return ip, lp


@pytest.mark.parametrize("zipped", [True, False])
def test_load_idx(tmp_path, zipped):
    images = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    ip, lp = _write_idx(tmp_path, images, np.array([3, 7], np.uint8), zipped)
    d = load_idx(ip, lp)
    assert d.inputs.shape == (2, 16)
    assert d.inputs.max() <= 1.0
    assert list(d.labels) == [3, 7]


def test_load_idx_count_mismatch(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(2, np.uint8))
    with pytest.raises(DataFormatError, match="labels"):
        load_idx(ip, lp)


def test_load_idx_label_range(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((1, 2, 2), np.uint8), np.array([12], np.uint8))
    with pytest.raises(DataFormatError, match="range"):
        load_idx(ip, lp)


def test_bundled_mnist_subset():
    d = load_idx("data/mnist5k/images-idx3-ubyte.gz", "data/mnist5k/labels-idx1-ubyte.gz")
    assert d.inputs.shape == (5000, 784)
    assert np.bincount(d.labels).tolist() == [500] * 10


@given(arrays(float, st.tuples(st.integers(2, 20), st.integers(1, 3)), elements=st.floats(-100, 100)))
def test_standardizer_inverse(x):
    s = Standardizer.fit(x)
    assert np.allclose(s.inverse(s.transform(x)), x, atol=1e-9)
    assert np.allclose(s.unscale_var(s.scale_var(x**2)), x**2)
    assert Standardizer.from_dict(s.to_dict()).std.tolist() == s.std.tolist()


def test_toy_cubic_deterministic():
    a, b = toy_cubic(30, seed=4), toy_cubic(30, seed=4)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)
    assert np.all(np.abs(a.inputs) <= 2)
    with pytest.raises(ValueError):
        toy_cubic(0)


def _classification(n_per=20, classes=4):
    labels = np.repeat(np.arange(classes), n_per)
    return Dataset(np.arange(len(labels), dtype=float)[:, None], one_hot(labels, classes), "classification", classes)


def test_split_disjoint_and_stratified():
    d = _classification()
    tr, te = train_test_split(d, 40, 20, seed=3)
    assert not set(tr.inputs[:, 0]) & set(te.inputs[:, 0])
    assert np.bincount(tr.labels).tolist() == [10] * 4
    assert np.bincount(te.labels).tolist() == [5] * 4
    tr2, te2 = train_test_split(d, 40, 20, seed=3)
    assert np.array_equal(tr.inputs, tr2.inputs) and np.array_equal(te.inputs, te2.inputs)


def test_subset_errors():
    d = _classification(n_per=3)
    with pytest.raises(ValueError):
        subset(d, count=40)
    with pytest.raises(ValueError):
        subset(d, classes=[9])
    assert np.unique(subset(d, classes=[1, 2]).labels).tolist() == [1, 2]


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,3\n4,5,6\n")
    d = load_csv(p)
    assert d.inputs.shape == (2, 2) and d.targets[:, 0].tolist() == [3, 6]
    p.write_text("a,y\n1,x\n")
    with pytest.raises(DataFormatError):
        load_csv(p)
    p.write_text("a,y\n")
    with pytest.raises(DataFormatError):
        load_csv(p)


def test_labels_need_classification():
    with pytest.raises(ValueError):
        toy_cubic(5).labels
