import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from istc.io import (
    read_keyvalue,
    read_matrix,
    read_matrix_csv,
    read_pnm,
    read_tensor,
    read_vector,
    write_keyvalue,
    write_matrix,
    write_matrix_csv,
    write_pnm,
    write_tensor,
)


def test_matrix_bytes_are_column_major_little_endian(tmp_path):
    p = tmp_path / "m.bin"
    write_matrix(p, [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    expected = b"SSLAB001" + struct.pack("<QQ", 3, 2) + struct.pack("<6d", 1, 3, 5, 2, 4, 6)
    assert p.read_bytes() == expected


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_matrix_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("m") / "a.bin"
    write_matrix(p, a)
    assert np.array_equal(read_matrix(p), a)


def test_vector_is_single_column(tmp_path):
    p = tmp_path / "v.bin"
    write_matrix(p, np.array([0.5, -1.0, 2.0]))
    assert read_matrix(p).shape == (3, 1)
    np.testing.assert_array_equal(read_vector(p), [0.5, -1.0, 2.0])


def test_matrix_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTMAGIC" + struct.pack("<QQ", 1, 1) + b"\0" * 8)
    with pytest.raises(ValueError):
        read_matrix(p)
    p.write_bytes(b"SSLAB001" + struct.pack("<QQ", 2, 2) + b"\0" * 8)
    with pytest.raises(ValueError):
        read_matrix(p)


def test_matrix_csv_round_trip_exact(tmp_path):
    a = np.random.default_rng(0).standard_normal((4, 3))
    p = tmp_path / "d.csv"
    write_matrix_csv(p, a)
    assert p.read_text().splitlines()[0] == "atom_0,atom_1,atom_2"
    assert np.array_equal(read_matrix_csv(p), a)


def test_matrix_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n1,2\n")
    with pytest.raises(ValueError):
        read_matrix_csv(p)


def test_tensor_bytes(tmp_path):
    p = tmp_path / "t.tensor"
    t = np.arange(6, dtype=float).reshape(1, 2, 3)
    write_tensor(p, t)
    expected = b"SSIMG001" + struct.pack("<Q", 3) + struct.pack("<3Q", 1, 2, 3) + struct.pack("<6d", *range(6))
    assert p.read_bytes() == expected
    assert np.array_equal(read_tensor(p), t)


def test_tensor_size_check(tmp_path):
    p = tmp_path / "t.tensor"
    p.write_bytes(b"SSIMG001" + struct.pack("<Q", 1) + struct.pack("<Q", 3) + b"\0" * 16)
    with pytest.raises(ValueError):
        read_tensor(p)


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_round_trip(tmp_path, maxval):
    img = np.random.default_rng(0).integers(0, maxval + 1, (5, 7)) / maxval
    p = tmp_path / "a.pgm"
    write_pnm(p, img, maxval)
    np.testing.assert_allclose(read_pnm(p), img, atol=0.5 / maxval)


def test_ppm_channel_layout(tmp_path):
    p = tmp_path / "c.ppm"
    # one row, two pixels: red then blue
    p.write_bytes(b"P6\n# comment line\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    img = read_pnm(p)
    assert img.shape == (3, 1, 2)
    np.testing.assert_array_equal(img[:, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(img[:, 0, 1], [0, 0, 1])


def test_ascii_pnm_rejected(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pnm(p)


def test_keyvalue_round_trip_and_comments(tmp_path):
    p = tmp_path / "cfg.txt"
    write_keyvalue(p, [("seed", 3), ("ratio", 0.1), ("name", "x")])
    assert p.read_text() == "seed = 3\nratio = 0.10000000000000001\nname = x\n"
    p.write_text("# header\nseed = 3  # trailing\n\nname=abc\n")
    assert read_keyvalue(p) == {"seed": "3", "name": "abc"}


def test_keyvalue_rejects_malformed(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("just words\n")
    with pytest.raises(ValueError):
        read_keyvalue(p)
