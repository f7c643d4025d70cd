import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwcrf.errors import FormatError, UnsupportedFormatError, ValidationError
from cwcrf.tensor_io import (
    argmax_labels,
    decode_tensor,
    encode_tensor,
    read_labels,
    read_ppm,
    read_tensor,
    validate_probability_map,
    write_pgm,
    write_tensor,
)


def test_roundtrip_constant(tmp_path):
    t = np.full((2, 2, 2), 0.25, dtype=np.float32)
    write_tensor(tmp_path / "t.cwt", t)
    back = read_tensor(tmp_path / "t.cwt")
    assert back.dtype == np.float32
    assert np.array_equal(back, t)


def test_roundtrip_seeded_payload_bytes(tmp_path):
    rng = np.random.default_rng(7)
    t = rng.random((7, 4, 4)).astype(np.float32)
    write_tensor(tmp_path / "p.cwt", t)
    back = read_tensor(tmp_path / "p.cwt")
    assert back.size == 112
    assert back.tobytes() == t.tobytes()


def test_header_layout():
    buf = encode_tensor(np.zeros((3, 2), dtype=np.uint8))
    assert buf[:4] == b"CWT1"
    assert buf[4] == 2
    assert struct.unpack("<2I", buf[5:13]) == (3, 2)
    assert buf[13] == 2
    assert len(buf) == 14 + 6


def test_bad_magic(tmp_path):
    buf = bytearray(encode_tensor(np.zeros((1,), np.float32)))
    buf[:4] = b"XXXX"
    (tmp_path / "bad.cwt").write_bytes(bytes(buf))
    with pytest.raises(FormatError) as exc:
        read_tensor(tmp_path / "bad.cwt")
    assert exc.value.offset == 0


def test_truncated_payload():
    buf = encode_tensor(np.ones((4, 4), np.float32))
    with pytest.raises(FormatError, match="truncated") as exc:
        decode_tensor(buf[:-3])
    assert exc.value.offset == len(buf) - 3


def test_dim_overflow():
    buf = b"CWT1" + bytes([3]) + struct.pack("<3I", 2**32 - 1, 2**32 - 1, 2**32 - 1) + bytes([1])
    with pytest.raises(FormatError, match="overflow"):
        decode_tensor(buf)


def test_non_finite_offset():
    arr = np.zeros(4, np.float32)
    buf = bytearray(encode_tensor(arr))
    buf[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(FormatError, match="non-finite") as exc:
        decode_tensor(bytes(buf))
    assert exc.value.offset == len(buf) - 4


def test_encode_rejects_nan():
    with pytest.raises(ValidationError):
        encode_tensor(np.array([np.inf], np.float32))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 5), min_size=1, max_size=4), st.booleans())
def test_roundtrip_property(seed, dims, as_u8):
    rng = np.random.default_rng(seed)
    if as_u8:
        t = rng.integers(0, 256, size=dims).astype(np.uint8)
    else:
        t = rng.standard_normal(dims).astype(np.float32)
    assert decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()


# -- netpbm --------------------------------------------------------------------


def test_single_pixel_ppm(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P6\n1 1\n255\n" + bytes([10, 20, 30]))
    r = read_ppm(tmp_path / "a.ppm")
    assert r.shape == (1, 1, 3)
    assert r[0, 0].tolist() == [10, 20, 30]


def test_pgm_label_roundtrip(tmp_path):
    labels = np.arange(9, dtype=np.uint8).reshape(3, 3)
    write_pgm(tmp_path / "l.pgm", labels)
    assert np.array_equal(read_labels(tmp_path / "l.pgm"), labels)


def test_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5 # made by hand\n2 1\n# max\n255\n" + bytes([1, 2]))
    assert read_ppm(tmp_path / "c.pgm")[0, :, 0].tolist() == [1, 2]


@pytest.mark.parametrize("content", [b"P5\n1 1\n65535\n\x00\x00", b"P2\n1 1\n255\n7\n", b"P3\n1 1\n255\n1 2 3\n"])
def test_unsupported_netpbm(tmp_path, content):
    (tmp_path / "u.pgm").write_bytes(content)
    with pytest.raises(UnsupportedFormatError):
        read_ppm(tmp_path / "u.pgm")


def test_truncated_raster(tmp_path):
    (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError, match="truncated"):
        read_ppm(tmp_path / "t.ppm")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))
def test_netpbm_roundtrip_property(tmp_path_factory, seed, h, w, ch):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, ch)).astype(np.uint8)
    path = tmp_path_factory.mktemp("pbm") / "x.ppm"
    write_pgm(path, img)
    assert read_ppm(path).tobytes() == img.tobytes()


def test_labels_from_cwt(tmp_path):
    labels = np.array([[0, 1], [2, 3]], np.uint8)
    write_tensor(tmp_path / "l.cwt", labels)
    assert np.array_equal(read_labels(tmp_path / "l.cwt"), labels)


# -- argmax / validation ---------------------------------------------------------


def test_argmax_examples():
    assert argmax_labels(np.array([0.2, 0.5, 0.3]).reshape(3, 1, 1))[0, 0] == 1
    assert argmax_labels(np.array([0.5, 0.5]).reshape(2, 1, 1))[0, 0] == 0
    uniform = np.full((5, 3, 4), 0.2)
    assert np.all(argmax_labels(uniform) == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_argmax_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=(4, 5)).transpose(2, 0, 1)
    scale = rng.uniform(0.1, 10.0, size=(1, 4, 5))
    assert np.array_equal(argmax_labels(p), argmax_labels(p * scale))
    labels = argmax_labels(validate_probability_map(p))
    assert labels.max() < c


def test_validate_one_hot():
    p = np.zeros((3, 2, 2), np.float32)
    p[1] = 1
    assert np.array_equal(validate_probability_map(p), p)


def test_validate_sum_too_large_names_pixel():
    p = np.full((2, 2, 3), 0.5, np.float32)
    p[0, 1, 2] = 0.6
    with pytest.raises(ValidationError, match=r"\(1, 2\)") as exc:
        validate_probability_map(p)
    assert exc.value.pixel == (1, 2)


def test_validate_tolerance_boundary():
    p = np.array([0.5 + 5e-6, 0.5]).reshape(2, 1, 1)
    validate_probability_map(p)


def test_validate_clamps_tiny_negatives():
    p = np.array([-5e-7, 1.0 + 5e-7]).reshape(2, 1, 1)
    out = validate_probability_map(p)
    assert out[0, 0, 0] == 0
    with pytest.raises(ValidationError):
        validate_probability_map(np.array([-1e-3, 1.001]).reshape(2, 1, 1))


def test_validate_requires_3d():
    with pytest.raises(ValidationError):
        validate_probability_map(np.ones((2, 2)))
