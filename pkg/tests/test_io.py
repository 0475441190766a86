import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_field
from streamsplat import io
from streamsplat.types import FieldValidationError, GaussianField


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 40))
def test_ply_round_trip(tmp_path_factory, seed, n):
    rng = np.random.default_rng(seed)
    f = random_field(rng, n, subgroup=rng.integers(0, 3, n))
    path = tmp_path_factory.mktemp("ply") / "f.ply"
    io.export_field(f, path)
    assert io.import_field(path) == f


def test_empty_field(tmp_path):
    io.export_field(GaussianField.empty(), tmp_path / "e.ply")
    assert b"element vertex 0" in (tmp_path / "e.ply").read_bytes()
    assert len(io.import_field(tmp_path / "e.ply")) == 0


def test_nan_rejected(tmp_path):
    f = random_field(np.random.default_rng(0), 3)
    io.export_field(f, tmp_path / "f.ply")
    buf = bytearray((tmp_path / "f.ply").read_bytes())
    start = buf.index(b"end_header\n") + len(b"end_header\n")
    buf[start:start + 4] = np.float32(np.nan).tobytes()
    (tmp_path / "g.ply").write_bytes(bytes(buf))
    with pytest.raises(FieldValidationError):
        io.import_field(tmp_path / "g.ply")


@pytest.mark.parametrize("case", ["magic", "property", "truncated", "trailing", "format"])
def test_malformed_ply(tmp_path, case):
    f = random_field(np.random.default_rng(0), 3)
    io.export_field(f, tmp_path / "f.ply")
    buf = (tmp_path / "f.ply").read_bytes()
    if case == "magic":
        buf = b"plx" + buf[3:]
    elif case == "property":
        buf = buf.replace(b"property float opacity", b"property float opaque")
    elif case == "truncated":
        buf = buf[:-5]
    elif case == "trailing":
        buf = buf + b"\0"
    else:
        buf = buf.replace(b"binary_little_endian", b"binary_big_endian")
    (tmp_path / "bad.ply").write_bytes(buf)
    with pytest.raises(io.PlyFormatError) as exc:
        io.import_field(tmp_path / "bad.ply")
    assert exc.value.offset >= 0 and "offset" in str(exc.value)


def test_png_rounds_half_up(tmp_path):
    img = np.array([[[0.5 / 255, 1.5 / 255, 254.5 / 255]]])
    np.testing.assert_array_equal(io.to_uint8(img), [[[1, 2, 255]]])
    rgb = np.random.default_rng(0).random((5, 6, 3))
    io.write_png(tmp_path / "a.png", rgb)
    assert np.abs(io.read_png(tmp_path / "a.png") - rgb).max() <= 0.5 / 255 + 1e-12


def test_sequence_round_trip(tmp_path, sphere_scene):
    _, frames, poses, intr = sphere_scene
    io.save_sequence(tmp_path, frames[:3], poses[:3], intr)
    fr2, poses2, intr2, _ = io.load_sequence(tmp_path)
    assert intr2 == intr and len(fr2) == 3
    for a, b in zip(frames, fr2):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(b.depth, a.depth.astype(np.float32))
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-9
    for p, q in zip(poses, poses2):
        assert p.allclose(q, atol=1e-12)
