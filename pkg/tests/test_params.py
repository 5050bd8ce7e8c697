import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from studmerge import params
from studmerge.params import (
    AlignmentError,
    BadMagicError,
    ChecksumMismatchError,
    CorruptCheckpointError,
    ParamMap,
    VersionMismatchError,
    axpy,
    distance,
    l2_norm,
)


def random_map(rng, shapes=None):
    shapes = shapes or {"conv.w": (3, 2, 2), "conv.b": (3,), "fc": (4, 5)}
    return ParamMap({k: rng.normal(size=s) for k, s in shapes.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_entries_sorted_regardless_of_insertion_order():
    a = ParamMap([("z", [1.0]), ("a", [2.0]), ("m", [3.0])])
    b = ParamMap([("m", [3.0]), ("z", [1.0]), ("a", [2.0])])
    assert a.names == ["a", "m", "z"] == b.names
    assert np.array_equal(a.flatten(), [2.0, 3.0, 1.0])


def test_invalid_names_rejected():
    with pytest.raises(ValueError):
        ParamMap({"": [1.0]})
    with pytest.raises(ValueError):
        ParamMap([("a", [1.0]), ("a", [2.0])])


def test_entries_are_float32_and_read_only():
    m = ParamMap({"w": np.arange(3, dtype=np.float64)})
    assert m["w"].dtype == np.float32
    with pytest.raises(ValueError):
        m["w"][0] = 5


def test_axpy_examples(rng):
    y = random_map(rng)
    assert axpy(0.0, random_map(rng), y) == y
    out = axpy(1.0, ParamMap({"w": [1, 2]}), ParamMap({"w": [3, 4]}))
    np.testing.assert_array_equal(out["w"], [4, 6])
    zero = axpy(-1.0, y, y)
    assert all(np.all(v == 0) for v in zero.values())


def test_misalignment_names_first_mismatch():
    x = ParamMap({"a": [1.0], "b": [1.0, 2.0]})
    with pytest.raises(AlignmentError, match="'b'"):
        axpy(1.0, x, ParamMap({"a": [1.0], "b": [1.0, 2.0, 3.0]}))
    with pytest.raises(AlignmentError, match="'b'"):
        distance(x, ParamMap({"a": [1.0], "c": [1.0, 2.0]}))


def test_l2_norm_examples(rng):
    assert l2_norm(ParamMap({"w": np.zeros(5)})) == 0
    assert l2_norm(ParamMap({"w": [3.0], "b": [4.0]})) == 5.0
    m = random_map(rng)
    oracle = np.sqrt(sum(float(x) ** 2 for v in m.values() for x in v.ravel()))
    assert l2_norm(m) == pytest.approx(oracle, rel=1e-7)


def test_distance_examples(rng):
    x = random_map(rng)
    assert distance(x, x) == 0
    assert distance(ParamMap({"w": [0, 0]}), ParamMap({"w": [3, 4]})) == 5
    y = random_map(rng)
    assert distance(x, y) == distance(y, x)


def test_flatten_roundtrip(rng):
    m = random_map(rng)
    assert m.unflatten(m.flatten()) == m


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, (3, 7), elements=finite))
def test_addition_associative_and_commutative(rows):
    x, y, z = (ParamMap({"w": r}) for r in rows)
    np.testing.assert_allclose(((x + y) + z)["w"], (x + (y + z))["w"], atol=1e-3, rtol=1e-6)
    np.testing.assert_array_equal((x + y)["w"], (y + x)["w"])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, 9, elements=finite), st.floats(-100, 100, allow_nan=False))
def test_norm_homogeneous(vec, c):
    x = ParamMap({"w": vec})
    expected = abs(c) * l2_norm(x)
    assert l2_norm(c * x) == pytest.approx(expected, rel=1e-6, abs=1e-30)


def test_roundtrip_bit_exact(tmp_path, rng):
    m = random_map(rng)
    path = tmp_path / "m.ckpt"
    params.save(m, path)
    back = params.load(path)
    assert back.names == m.names
    for k in m:
        assert back[k].tobytes() == m[k].tobytes()


def test_same_map_same_bytes(tmp_path, rng):
    m = random_map(rng)
    params.save(m, tmp_path / "a")
    params.save(ParamMap(reversed(list(m.items()))), tmp_path / "b")
    ha = hashlib.sha256((tmp_path / "a").read_bytes()).hexdigest()
    hb = hashlib.sha256((tmp_path / "b").read_bytes()).hexdigest()
    assert ha == hb


def test_layout_matches_documented_table():
    blob = params.to_bytes(ParamMap({"ab": np.array([[1.5, -2.0]])}))
    assert blob[:8] == b"STUDPMAP"
    assert blob[8] == 1
    assert int.from_bytes(blob[9:13], "little") == 1
    assert int.from_bytes(blob[13:15], "little") == 2
    assert blob[15:17] == b"ab"
    assert blob[17] == 2
    assert np.frombuffer(blob[18:26], "<u4").tolist() == [1, 2]
    assert np.frombuffer(blob[26:34], "<f4").tolist() == [1.5, -2.0]
    assert blob[34:] == hashlib.sha256(blob[:34]).digest()


def test_load_errors_are_distinct(tmp_path, rng):
    blob = params.to_bytes(random_map(rng))
    with pytest.raises(ChecksumMismatchError):
        params.from_bytes(blob[:-10])
    with pytest.raises(BadMagicError):
        params.from_bytes(b"NOTACKPT" + blob[8:])
    bumped = bytearray(blob)
    bumped[8] = 2
    with pytest.raises(VersionMismatchError):
        params.from_bytes(bytes(bumped))
    flipped = bytearray(blob)
    flipped[40] ^= 0xFF
    with pytest.raises(ChecksumMismatchError):
        params.from_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        params.from_bytes(blob[:12])
    with pytest.raises(OSError):
        params.load(tmp_path / "missing.ckpt")
