import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from voxelkit.core import NdImage
from voxelkit.errors import BadMagic, EvenExtent, HeaderMismatch, PlacementFailure, TruncatedPayload
from voxelkit.iosynth import (
    SynthSpec,
    export_slice,
    gaussian_psf,
    generate_blobs,
    generate_cell_phantom,
    read_pgm,
    read_volume,
    write_volume,
)
from voxelkit.metrics import average_precision

# ---------------------------------------------------------------------------
# NDIV


def test_round_trip_ramp(tmp_path):
    img = NdImage(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    write_volume(tmp_path / "r.ndiv", img)
    back = read_volume(tmp_path / "r.ndiv")
    assert back.shape == (2, 2, 2)
    assert back.data.tobytes() == img.data.tobytes()


def test_spacing_survives(tmp_path):
    img = NdImage(np.zeros((2, 3, 4), np.float32), spacing=[0.29, 0.065, 0.065])
    write_volume(tmp_path / "s.ndiv", img)
    assert read_volume(tmp_path / "s.ndiv").spacing == (0.29, 0.065, 0.065)


_kinds = st.sampled_from([np.float32, np.uint16, np.uint32, np.bool_])


@given(st.data())
def test_round_trip_all_kinds(tmp_path_factory, data):
    dtype = data.draw(_kinds)
    a = data.draw(hnp.arrays(dtype, hnp.array_shapes(min_dims=1, max_dims=4, max_side=4)))
    if dtype == np.float32:
        a = np.nan_to_num(a)
    img = NdImage(a)
    path = tmp_path_factory.mktemp("rt") / "v.ndiv"
    write_volume(path, img)
    back = read_volume(path)
    assert back.elem == img.elem and back.shape == img.shape
    assert back.data.tobytes() == img.data.tobytes()


def _raw(header: dict, payload: bytes) -> bytes:
    blob = json.dumps(header).encode()
    return b"NDIV" + struct.pack("<I", len(blob)) + blob + payload


def test_truncated_and_long_payload(tmp_path):
    p = tmp_path / "t.ndiv"
    p.write_bytes(_raw({"elem": "f32", "shape": [2, 2], "axes": "YX", "spacing": None},
                       np.zeros(9, "<f4").tobytes()))
    with pytest.raises(TruncatedPayload):
        read_volume(p)
    p.write_bytes(_raw({"elem": "f32", "shape": [2, 2], "axes": "YX", "spacing": None},
                       np.zeros(3, "<f4").tobytes()))
    with pytest.raises(TruncatedPayload):
        read_volume(p)


def test_bad_magic_and_header(tmp_path):
    p = tmp_path / "b.ndiv"
    p.write_bytes(b"TIFF" + b"\0" * 16)
    with pytest.raises(BadMagic):
        read_volume(p)
    p.write_bytes(_raw({"elem": "f32", "shape": [2, 2], "axes": "ZYX"}, b""))
    with pytest.raises(HeaderMismatch):
        read_volume(p)
    p.write_bytes(_raw({"elem": "f64", "shape": [1], "axes": "X"}, b"\0" * 8))
    with pytest.raises(HeaderMismatch):
        read_volume(p)


def test_file_layout_is_little_endian(tmp_path):
    write_volume(tmp_path / "l.ndiv", NdImage(np.array([1], np.uint16)))
    raw = (tmp_path / "l.ndiv").read_bytes()
    assert raw[:4] == b"NDIV"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    assert header == {"axes": "X", "elem": "u16", "shape": [1], "spacing": None}
    assert raw[8 + hlen:] == b"\x01\x00"


# ---------------------------------------------------------------------------
# PGM


def test_export_slice(tmp_path):
    vol = np.zeros((3, 4, 5), np.float32)
    vol[1] = np.arange(20).reshape(4, 5)
    export_slice(NdImage(vol), 0, 1, tmp_path / "s.pgm")
    px = read_pgm(tmp_path / "s.pgm")
    assert px.shape == (4, 5)
    assert px.min() == 0 and px.max() == 255
    expected = np.floor(np.arange(20).reshape(4, 5) / 19 * 255 + 0.5)
    np.testing.assert_array_equal(px, expected)
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n5 4\n255\n")


# ---------------------------------------------------------------------------
# blobs


def test_zero_objects():
    img, lab = generate_blobs(SynthSpec(shape=(8, 16, 16), n_objects=0, noise_sigma=0))
    assert not img.data.any() and not lab.data.any()


def test_deterministic():
    spec = SynthSpec(shape=(16, 48, 48), n_objects=5, radius_range=(3, 5), seed=7)
    a, la = generate_blobs(spec)
    b, lb = generate_blobs(spec)
    assert a.data.tobytes() == b.data.tobytes() and la.data.tobytes() == lb.data.tobytes()


def test_twenty_objects_ap_self():
    img, lab = generate_blobs(SynthSpec(shape=(32, 128, 128), n_objects=20))
    ids = np.unique(lab.data)
    np.testing.assert_array_equal(ids, np.arange(21))
    assert average_precision(lab, lab) == 1.0


@given(st.integers(0, 2 ** 32), st.integers(1, 6))
def test_blobs_inside_and_consecutive(seed, n):
    spec = SynthSpec(shape=(12, 40, 40), n_objects=n, radius_range=(2, 4), seed=seed, gap=1)
    _, lab = generate_blobs(spec)
    assert set(np.unique(lab.data)) == set(range(n + 1))
    # labelled cores never touch the border
    for ax in range(3):
        assert not np.take(lab.data, 0, axis=ax).any()
        assert not np.take(lab.data, -1, axis=ax).any()


def test_placement_failure():
    with pytest.raises(PlacementFailure):
        generate_blobs(SynthSpec(shape=(8, 8, 8), n_objects=50, radius_range=(3, 3), max_tries=50))


def test_anisotropy_squashes_z():
    _, lab = generate_blobs(SynthSpec(shape=(20, 40, 40), n_objects=1, radius_range=(8, 8), anisotropy=2.0,
                                      noise_sigma=0))
    zs, ys, _ = np.nonzero(lab.data)
    assert np.ptp(zs) < np.ptp(ys)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(radius_range=(0, 3))
    with pytest.raises(ValueError):
        SynthSpec(seed=-1)


def test_cell_phantom_structure():
    spec = SynthSpec(shape=(24, 96, 96), n_objects=4, radius_range=(8, 10), gap=4, seed=3)
    ph = generate_cell_phantom(spec, headroom=4)
    assert ph.membrane.shape == (28, 96, 96)
    cells, nuclei = ph.cells.data, ph.nuclei.data
    assert set(np.unique(cells)) == set(range(5))
    for n in range(1, 5):
        assert np.all(cells[nuclei == n] == n)


# ---------------------------------------------------------------------------
# PSF


def test_psf_delta_limit():
    psf = gaussian_psf((5, 5, 5), 1e-3).data
    assert psf[2, 2, 2] == pytest.approx(1.0)
    assert psf.sum() - psf[2, 2, 2] < 1e-12


@given(st.tuples(*[st.integers(0, 4).map(lambda k: 2 * k + 1)] * 3),
       st.tuples(*[st.floats(0.3, 4.0)] * 3))
def test_psf_normalized_and_symmetric(shape, sigmas):
    psf = gaussian_psf(shape, sigmas).data
    assert abs(float(psf.astype(np.float64).sum()) - 1.0) <= 1e-6
    assert psf.min() >= 0
    np.testing.assert_array_equal(psf, psf[::-1, ::-1, ::-1])


def test_psf_even_extent():
    with pytest.raises(EvenExtent):
        gaussian_psf((4, 5, 5), 1.0)
