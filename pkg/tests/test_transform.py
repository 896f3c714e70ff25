import numpy as np
import pytest
import scipy.ndimage as ndi
from hypothesis import given
from hypothesis import strategies as st

from voxelkit.core import ACCELERATED, REFERENCE, NdImage, to_backend
from voxelkit.errors import BadOrder, NonPositiveFactor
from voxelkit.iosynth import SynthSpec, generate_blobs
from voxelkit.metrics import psnr
from voxelkit.transform import antialias_sigmas, bspline, output_extent, rescale, upscale2x_downscale

from conftest import f32, pair

BACKENDS = [REFERENCE, ACCELERATED]
ORDERS = range(6)


def test_output_extent_rounding():
    assert output_extent(5, 0.5) == 3
    assert output_extent(7, 0.5) == 4
    assert output_extent(3, 0.1) == 1
    assert output_extent(60, 2.0) == 120


@given(st.lists(st.integers(1, 12), min_size=1, max_size=3), st.floats(0.1, 3.0), st.sampled_from(list(ORDERS)))
def test_shape_contract(shape, factor, order):
    img = f32(np.random.default_rng(0).random(shape))
    out = rescale(img, factor, order=order)
    assert out.shape == tuple(max(1, int(np.floor(n * factor + 0.5))) for n in shape)


@pytest.mark.parametrize("order", ORDERS)
@pytest.mark.parametrize("be", BACKENDS)
def test_factor_one_identity(order, be):
    a = np.random.default_rng(1).random((4, 5, 6)).astype(np.float32)
    out = rescale(to_backend(NdImage(a), be), 1.0, order=order)
    np.testing.assert_allclose(out.data, a, atol=1e-5)


@pytest.mark.parametrize("be", BACKENDS)
def test_nearest_duplication(be):
    out = rescale(to_backend(f32([3.0, 8.0]), be), 2.0, order=0)
    np.testing.assert_array_equal(out.data, [3, 3, 8, 8])


@pytest.mark.parametrize("be", BACKENDS)
def test_linear_ramp_round_trip_interior(be):
    ramp = f32(np.arange(32, dtype=np.float32) * 0.5 + 1.0)
    up = rescale(to_backend(ramp, be), 2.0, order=1)
    down = rescale(up, 0.5, order=1)
    # mirrored edge samples only affect the first and last output
    np.testing.assert_allclose(down.data[1:-1], ramp.data[1:-1], atol=1e-4)


@pytest.mark.parametrize("order", [2, 3, 4, 5])
@pytest.mark.parametrize("be", BACKENDS)
def test_spline_reproduces_grid_samples(order, be):
    # with factor 3, output sample 3k+1 sits exactly on input sample k
    a = np.random.default_rng(order).random((7, 9, 11)).astype(np.float32)
    out = rescale(to_backend(NdImage(a), be), 3.0, order=order).data
    np.testing.assert_allclose(out[1::3, 1::3, 1::3], a, atol=1e-4)


@pytest.mark.parametrize("order", [2, 3, 4, 5])
def test_spline_matches_scipy_mirror(order):
    a = np.random.default_rng(10 + order).random((6, 13, 10))
    factors = (1.7, 0.6, 2.3)
    out = rescale(f32(a), factors, order=order).data
    grids = [(np.arange(m) + 0.5) / f - 0.5 for m, f in zip(out.shape, factors)]
    coords = np.meshgrid(*grids, indexing="ij")
    expected = ndi.map_coordinates(a, coords, order=order, mode="mirror")
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_bspline_partition_of_unity():
    t = np.linspace(-0.5, 0.5, 11)
    for order in range(1, 6):
        total = sum(bspline(order, t - k) for k in range(-4, 5))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_antialias_sigma_formula():
    assert antialias_sigmas([0.5, 1.0, 2.0, 0.25]) == (0.5, 0.0, 0.0, 1.5)


def test_antialias_applied_only_on_shrinking_axes():
    a = np.random.default_rng(2).random((8, 16)).astype(np.float32)
    plain = rescale(f32(a), [2.0, 0.5], order=1).data
    aa = rescale(f32(a), [2.0, 0.5], order=1, anti_aliasing=True).data
    assert not np.allclose(plain, aa)
    assert plain.var() > aa.var()


def test_errors():
    img = f32(np.zeros((3, 3)))
    with pytest.raises(BadOrder):
        rescale(img, 2.0, order=6)
    with pytest.raises(BadOrder):
        rescale(img, 2.0, order=True)
    with pytest.raises(NonPositiveFactor):
        rescale(img, [1.0, 0.0])


def test_order0_keeps_label_kind():
    lab = NdImage(np.array([[1, 2], [3, 4]], np.uint32))
    out = rescale(lab, 2.0, order=0)
    assert out.elem == "u32"
    assert set(np.unique(out.data)) == {1, 2, 3, 4}


def test_output_shape_override_and_spacing():
    img = NdImage(np.zeros((5, 7), np.float32), spacing=[1.0, 2.0])
    out = rescale(img, 0.5, order=1, output_shape=(3, 4))
    assert out.shape == (3, 4)
    assert out.spacing == pytest.approx((5 / 3, 3.5))


@pytest.mark.parametrize("order", [0, 1])
def test_low_orders_stay_in_range(order):
    a = np.random.default_rng(3).random((6, 7, 8)).astype(np.float32)
    out = rescale(f32(a), [1.7, 0.6, 2.2], order=order).data
    assert out.min() >= a.min() - 1e-6 and out.max() <= a.max() + 1e-6


# ---------------------------------------------------------------------------
# up/down benchmark workload


@pytest.mark.parametrize("order", ORDERS)
@pytest.mark.parametrize("be", BACKENDS)
def test_updown_constant(order, be):
    img = to_backend(f32(np.full((5, 6, 7), 0.75)), be)
    out = upscale2x_downscale(img, order)
    assert out.shape == img.shape
    np.testing.assert_allclose(out.data, 0.75, atol=1e-5)


@given(st.lists(st.integers(1, 9), min_size=1, max_size=3))
def test_updown_order0_identity(shape):
    a = np.random.default_rng(sum(shape)).random(shape).astype(np.float32)
    for be in BACKENDS:
        out = upscale2x_downscale(to_backend(NdImage(a), be), 0)
        assert out.data.tobytes() == a.tobytes()


def test_updown_smooth_blobs_psnr():
    img, _ = generate_blobs(SynthSpec(shape=(24, 64, 64), n_objects=6, radius_range=(5, 8), noise_sigma=0, seed=4))
    out = upscale2x_downscale(img, 1)
    assert psnr(out, img) > 30.0


@pytest.mark.parametrize("order", ORDERS)
def test_updown_backends_agree(order):
    a = np.random.default_rng(order).random((6, 20, 22)).astype(np.float32)
    r, c = pair(NdImage(a))
    diff = np.abs(upscale2x_downscale(r, order).data.astype(np.float64) - upscale2x_downscale(c, order).data)
    assert diff.max() <= 1e-4
