import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capture_kernels.matrix_io import (read_csv, read_matrices, read_matrix, write_csv,
                                       write_matrices, write_matrix)


def test_layout_is_column_major_little_endian(tmp_path):
    m = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    write_matrix(tmp_path / "a.kmat", m)
    raw = (tmp_path / "a.kmat").read_bytes()
    assert raw[:4] == b"KMAT"
    assert struct.unpack_from("<IQQB", raw, 4) == (1, 3, 2, 0)
    assert struct.unpack_from("<6d", raw, 25) == (1.0, 3.0, 5.0, 2.0, 4.0, 6.0)


def test_multiple_records_with_stderr(tmp_path):
    a, b = np.eye(2), np.arange(6.0).reshape(2, 3)
    write_matrices(tmp_path / "m.kmat", [(a, 0.1 * a), (b, None)])
    recs = read_matrices(tmp_path / "m.kmat")
    np.testing.assert_array_equal(recs[0][0], a)
    np.testing.assert_array_equal(recs[0][1], 0.1 * a)
    np.testing.assert_array_equal(recs[1][0], b)
    assert recs[1][1] is None


def test_bad_magic_and_truncation(tmp_path):
    write_matrix(tmp_path / "a.kmat", np.eye(3))
    raw = (tmp_path / "a.kmat").read_bytes()
    (tmp_path / "b.kmat").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "b.kmat")
    (tmp_path / "c.kmat").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "c.kmat")


def test_stderr_shape_checked(tmp_path):
    with pytest.raises(ValueError):
        write_matrix(tmp_path / "a.kmat", np.eye(2), np.eye(3))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_binary_and_csv_round_trip(tmp_path_factory, m):
    d = tmp_path_factory.mktemp("io")
    se = np.abs(m) * 0.5
    write_matrix(d / "m.kmat", m, se)
    got, got_se = read_matrix(d / "m.kmat")
    np.testing.assert_array_equal(got, m)
    np.testing.assert_array_equal(got_se, se)
    write_csv(d / "m.csv", m, se)
    got, got_se = read_csv(d / "m.csv")
    np.testing.assert_array_equal(got, m)
    np.testing.assert_array_equal(got_se, se)
