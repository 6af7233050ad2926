import numpy as np
import pytest
import scipy.sparse as sp

from fedsource.data import (
    ADULT_FIELDS,
    DATA_DIR_ENV,
    DataFormatError,
    check_ranges,
    even_ranges,
    load_dataset,
    load_libsvm,
    merge,
    save_libsvm,
    train_test_split,
    vsplit,
)


def write(tmp_path, text, name="d.svm"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_one_based_parse(tmp_path):
    ds = load_libsvm(write(tmp_path, "+1 1:0.5 3:2\n-1 2:1 # comment\n\n"))
    assert ds.X.shape == (2, 3)
    assert ds.X.toarray().tolist() == [[0.5, 0, 2], [0, 1, 0]]
    # labels remapped in sorted order: -1 -> 0, +1 -> 1
    assert ds.y.tolist() == [1, 0]


def test_zero_based_detected(tmp_path):
    ds = load_libsvm(write(tmp_path, "0 0:1 2:1\n1 1:3\n"))
    assert ds.X.toarray().tolist() == [[1, 0, 1], [0, 3, 0]]


def test_declared_width(tmp_path):
    p = write(tmp_path, "1 2:1\n")
    assert load_libsvm(p, n_features=5).X.shape == (1, 5)
    with pytest.raises(DataFormatError):
        load_libsvm(p, n_features=1)


@pytest.mark.parametrize("text,where", [("x 1:1\n", ":1:"), ("1 1:1\n1 2\n", ":2:"), ("1 a:1\n", ":1:"), ("1 -3:1\n", ":1:")])
def test_errors_carry_line_numbers(tmp_path, text, where):
    with pytest.raises(DataFormatError, match=where):
        load_libsvm(write(tmp_path, text))


def test_save_load_roundtrip(tmp_path, gen):
    X = sp.random(20, 7, density=0.3, format="csr", random_state=gen)
    y = gen.integers(0, 2, size=20)
    p = tmp_path / "r.svm"
    save_libsvm(p, X, y)
    back = load_libsvm(p, n_features=7)
    assert (back.X != X).nnz == 0
    assert back.y.tolist() == y.tolist()


def test_even_ranges():
    assert even_ranges(123) == [(0, 62), (62, 123)]
    assert even_ranges(300) == [(0, 150), (150, 300)]
    assert even_ranges(10, 3) == [(0, 4), (4, 7), (7, 10)]
    with pytest.raises(ValueError):
        even_ranges(1, 2)


def test_range_checks():
    check_ranges([(0, 3), (3, 5)], 5)
    with pytest.raises(ValueError, match="overlap"):
        check_ranges([(0, 3), (2, 5)], 5)
    with pytest.raises(ValueError, match="no party"):
        check_ranges([(0, 2), (3, 5)], 5)
    with pytest.raises(ValueError, match="no party"):
        check_ranges([(0, 2), (2, 4)], 5)


def test_split_and_merge(gen):
    X = sp.random(6, 9, density=0.5, format="csr", random_state=gen)
    parts = vsplit(X, [(0, 4), (4, 9)])
    assert [p.shape[1] for p in parts] == [4, 5]
    assert (merge(parts) != X).nnz == 0


def test_adult_surrogate_shape():
    ds = load_dataset("a9a", 500)
    assert ds.X.shape == (500, 123) and sum(ADULT_FIELDS) == 123
    assert ds.X.getnnz(axis=1).mean() == 14
    assert set(np.unique(ds.y)) == {0, 1}


def test_web_surrogate_shape():
    ds = load_dataset("w8a", 2000)
    assert ds.X.shape == (2000, 300)
    assert abs(ds.X.getnnz(axis=1).mean() - 12) < 1


def test_categorical_surrogates():
    ds = load_dataset("categorical", 50)
    assert ds.cats.shape == (50, 2) and ds.vocab == (20, 20)
    sep = load_dataset("separable", 50)
    assert sep.X.shape == (50, 0) and ds.cats.max() < 20


def test_local_file_preferred(tmp_path, monkeypatch):
    write(tmp_path, "1 1:1\n0 123:1\n", name="a9a")
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path))
    ds = load_dataset("a9a")
    assert ds.X.shape == (2, 123)
    with pytest.raises(KeyError):
        load_dataset("nope")


def test_train_test_split_partitions():
    ds = load_dataset("a9a", 100)
    tr, te = train_test_split(ds, 0.2, seed=1)
    assert len(tr) == 80 and len(te) == 20
