import struct

import numpy as np
import pytest

from sadfn.io import (
    FormatError,
    load_complex_tns,
    load_pgm,
    load_tns,
    read_config,
    save_complex_tns,
    save_pgm,
    save_tns,
    write_config,
)


def test_tns_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
    save_tns(tmp_path / "a.tns", a)
    np.testing.assert_array_equal(load_tns(tmp_path / "a.tns"), a)


def test_tns_layout(tmp_path):
    save_tns(tmp_path / "a.tns", np.array([[1.0, 2.0]]))
    raw = (tmp_path / "a.tns").read_bytes()
    assert raw[:4] == b"TNS1"
    assert struct.unpack("<3I", raw[4:16]) == (2, 1, 2)
    assert struct.unpack("<2f", raw[16:]) == (1.0, 2.0)


def test_tns_scalar(tmp_path):
    save_tns(tmp_path / "s.tns", np.float32(3.5))
    assert load_tns(tmp_path / "s.tns").shape == ()


def test_tns_truncated(tmp_path):
    save_tns(tmp_path / "a.tns", np.zeros((4, 4)))
    p = tmp_path / "a.tns"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError, match="expected 16"):
        load_tns(p)


def test_tns_bad_magic(tmp_path):
    (tmp_path / "x.tns").write_bytes(b"NOPE\0\0\0\0")
    with pytest.raises(FormatError):
        load_tns(tmp_path / "x.tns")


def test_tns_missing_file(tmp_path):
    with pytest.raises(FormatError, match="cannot read"):
        load_tns(tmp_path / "missing.tns")


def test_complex_round_trip(tmp_path):
    z = np.array([[1 + 2j, -0.5j]])
    save_complex_tns(tmp_path / "z.tns", z)
    np.testing.assert_allclose(load_complex_tns(tmp_path / "z.tns"), z)


def test_pgm_round_trip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    save_pgm(tmp_path / "g.pgm", g)
    np.testing.assert_array_equal(load_pgm(tmp_path / "g.pgm"), g)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")


def test_pgm_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        save_pgm(tmp_path / "g.pgm", np.array([[300]]))


def test_config_round_trip(tmp_path):
    write_config(tmp_path / "c.txt", {"lr": 0.001, "name": "rec", "n": 3, "flag": True})
    assert read_config(tmp_path / "c.txt") == {"lr": 0.001, "name": "rec", "n": 3, "flag": True}


def test_config_comments_and_dashes(tmp_path):
    (tmp_path / "c.txt").write_text("# header\nbatch-size = 8  # trailing\n\n")
    assert read_config(tmp_path / "c.txt") == {"batch_size": 8}


def test_config_malformed(tmp_path):
    (tmp_path / "c.txt").write_text("no equals sign\n")
    with pytest.raises(FormatError, match=":1:"):
        read_config(tmp_path / "c.txt")
