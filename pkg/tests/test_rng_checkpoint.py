"""Seed derivation and the binary state file format."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from raad.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from raad.errors import ContractError, ParameterError
from raad.rng import Rng, derive


def test_derive_deterministic_and_key_sensitive():
    assert derive(7, 1, 2) == derive(7, 1, 2)
    assert derive(7, 1, 2) != derive(7, 2, 1)
    assert derive(7, 1) != derive(8, 1)
    assert derive(7) != derive(7, 0)


def test_derive_returns_uint64_range():
    for s in (0, 1, 2**63, 2**64 - 1):
        v = derive(s, 3)
        assert 0 <= v < 2**64


def test_uniform_bounds_and_determinism():
    a = Rng(123).uniform(0.25, 0.75, 1000)
    b = Rng(123).uniform(0.25, 0.75, 1000)
    assert_allclose(a, b)
    assert np.all(a >= 0.25) and np.all(a < 0.75)


def test_uniform_spread():
    # sanity: a thousand draws should span most of the unit interval
    x = Rng(9).uniform(size=1000)
    assert x.min() < 0.05 and x.max() > 0.95
    assert abs(x.mean() - 0.5) < 0.05


def test_randint_range_and_coverage():
    r = Rng(5)
    draws = {r.randint(4) for _ in range(2000)}
    assert draws == {0, 1, 2, 3}


def test_randint_invalid():
    with pytest.raises(ParameterError):
        Rng(0).randint(0)


def test_choice_no_replacement():
    got = Rng(11).choice(10, 6)
    assert len(set(got.tolist())) == 6
    assert np.all((got >= 0) & (got < 10))
    with pytest.raises(ParameterError):
        Rng(11).choice(3, 4)


def test_child_streams_are_distinct():
    r = Rng(77)
    a = r.child(1).uniform(size=8)
    b = r.child(2).uniform(size=8)
    assert not np.allclose(a, b)
    assert_allclose(a, Rng(77).child(1).uniform(size=8))


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "state.ckpt"
    rng = np.random.default_rng(0)
    tensors = {
        "conv0/weight": rng.normal(size=(4, 3, 5, 5)),
        "conv0/bias": rng.normal(size=4),
        "scalarish": np.array(3.5),
        "empty_name_ok/x": np.zeros((1, 1)),
    }
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert sorted(back) == sorted(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == np.float64
        assert back[name].shape == arr.shape
        assert np.array_equal(back[name], arr)


def test_checkpoint_byte_determinism(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.0])}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors)
    save_checkpoint(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "h.ckpt"
    save_checkpoint(path, {"w": np.zeros((2, 2))})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert int.from_bytes(raw[8:12], "little") == 1  # version
    assert int.from_bytes(raw[12:16], "little") == 1  # tensor count


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTRIGHT" + b"\x00" * 16)
    with pytest.raises(ContractError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"w": np.zeros(1)})
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(ContractError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"w": np.zeros((3, 3))})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 5])
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_checkpoint_trailing_garbage(tmp_path):
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, {"w": np.zeros(2)})
    path.write_bytes(path.read_bytes() + b"\xff\xff")
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_checkpoint_loaded_arrays_are_owned(tmp_path):
    path = tmp_path / "o.ckpt"
    save_checkpoint(path, {"w": np.ones(4)})
    back = load_checkpoint(path)
    back["w"][0] = -1.0  # must not fail on a read-only view
    assert load_checkpoint(path)["w"][0] == 1.0
