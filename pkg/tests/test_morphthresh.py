import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from voxelkit.core import ACCELERATED, REFERENCE, NdImage, to_backend
from voxelkit.errors import DegenerateImage
from voxelkit.filters import StructuringElement
from voxelkit.morphthresh import (
    binary_morphology,
    fill_holes,
    multi_otsu,
    otsu_threshold,
    remove_small_objects,
)

from conftest import f32

BACKENDS = [REFERENCE, ACCELERATED]


# ---------------------------------------------------------------------------
# exhaustive oracles (direct class statistics per candidate, no cumulative sums)


def _edges(x, bins=256):
    lo, hi = float(x.min()), float(x.max())
    return lo + (hi - lo) * np.arange(bins + 1) / bins


def between_class_variance(x: np.ndarray, cuts) -> float:
    """Sum of n_c * mean_c^2 over the classes split at thresholds `cuts` (v >= t)."""
    cls = np.zeros(x.shape, dtype=np.int64)
    for t in cuts:
        cls += x >= t
    total = 0.0
    for c in range(len(cuts) + 1):
        v = x[cls == c]
        if v.size == 0:
            return -np.inf
        total += v.size * v.mean() ** 2
    return total


def _better(s: float, best: float) -> bool:
    # strictly better beyond the tie window; the first finite score always wins
    if not np.isfinite(best):
        return s > best
    return s > best + 1e-9 * abs(best)


def otsu_oracle(x: np.ndarray, bins=256) -> float:
    x = x.astype(np.float64).ravel()
    e = _edges(x, bins)
    scores = [between_class_variance(x, [t]) for t in e[1:-1]]
    best = max(scores)
    return float(e[1 + next(i for i, s in enumerate(scores) if s >= best - 1e-9 * abs(best))])


def multi_otsu_oracle(x: np.ndarray, bins=256) -> list[float]:
    x = x.astype(np.float64).ravel()
    e = _edges(x, bins)
    inner = e[1:-1]
    # the score only changes where a candidate crosses data, so scan occupied edges
    best, arg = -np.inf, None
    for i, j in itertools.combinations(range(len(inner)), 2):
        s = between_class_variance(x, [inner[i], inner[j]])
        if _better(s, best):
            best, arg = s, (inner[i], inner[j])
    return [float(arg[0]), float(arg[1])]


def bimodal(seed, n=400):
    rng = np.random.default_rng(seed)
    k = rng.integers(n // 4, 3 * n // 4)
    return np.concatenate([rng.normal(0.2, 0.05, k), rng.normal(0.7, 0.1, n - k)]).astype(np.float32)


# ---------------------------------------------------------------------------
# otsu


def test_otsu_two_deltas():
    x = np.concatenate([np.zeros(50), np.ones(50)])
    t = otsu_threshold(f32(x))
    assert 0 < t < 1
    assert np.all((x >= t) == (x == 1))


@pytest.mark.parametrize("seed", range(10))
def test_otsu_matches_exhaustive(seed):
    x = bimodal(seed)
    assert otsu_threshold(f32(x)) == pytest.approx(otsu_oracle(x), abs=0)


@pytest.mark.parametrize("seed", range(5))
def test_otsu_affine_consistency(seed):
    x = bimodal(seed)
    t1 = otsu_threshold(f32(x))
    t2 = otsu_threshold(f32(2 * x))
    width = (x.max() - x.min()) / 256
    assert abs(t1 - t2 / 2) <= width + 1e-6


def test_otsu_constant():
    with pytest.raises(DegenerateImage):
        otsu_threshold(f32(np.full(10, 3.0)))


def test_otsu_backend_fallback_equal():
    x = f32(bimodal(11))
    assert otsu_threshold(to_backend(x, ACCELERATED)) == otsu_threshold(x)


# ---------------------------------------------------------------------------
# multi-otsu


def test_multi_otsu_two_classes_is_otsu():
    x = f32(bimodal(1))
    assert multi_otsu(x, classes=2) == [otsu_threshold(x)]


def test_multi_otsu_three_deltas():
    x = np.repeat([0.0, 0.5, 1.0], 30)
    t1, t2 = multi_otsu(f32(x), 3)
    assert 0 < t1 <= 0.5 < t2 <= 1.0


@pytest.mark.parametrize("seed", range(3))
def test_multi_otsu_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(m, 0.04, 60) for m in (0.1, 0.5, 0.9)]).astype(np.float32)
    assert multi_otsu(f32(x), 3, bins=64) == multi_otsu_oracle(x, bins=64)


@pytest.mark.parametrize("classes", [4, 5])
def test_multi_otsu_dp_matches_bruteforce(classes):
    rng = np.random.default_rng(classes)
    x = np.concatenate([rng.normal(m, 0.03, 40) for m in np.linspace(0, 1, classes)]).astype(np.float32)
    bins = 16
    e = _edges(x.astype(np.float64), bins)[1:-1]
    best, arg = -np.inf, None
    for cuts in itertools.combinations(e, classes - 1):
        s = between_class_variance(x.astype(np.float64), cuts)
        if _better(s, best):
            best, arg = s, list(cuts)
    got = multi_otsu(f32(x), classes, bins=bins)
    np.testing.assert_allclose(got, arg, rtol=0, atol=1e-12)


def test_multi_otsu_increasing_and_degenerate():
    t = multi_otsu(f32(bimodal(3)), 3)
    assert t[0] < t[1]
    with pytest.raises(DegenerateImage):
        multi_otsu(f32([0.0, 1.0, 0.0]), 3)


# ---------------------------------------------------------------------------
# morphology


def minkowski_oracle(m: np.ndarray, se: StructuringElement, op: str) -> np.ndarray:
    offs = [tuple(o) for o in se.offsets.tolist()]
    shape = m.shape

    def get(p):
        return all(0 <= c < n for c, n in zip(p, shape)) and m[p]

    out = np.zeros(shape, bool)
    for p in itertools.product(*[range(n) for n in shape]):
        if op == "erode":
            out[p] = all(get(tuple(a + b for a, b in zip(p, o))) for o in offs)
        else:
            out[p] = any(get(tuple(a - b for a, b in zip(p, o))) for o in offs)
    return out


@pytest.mark.parametrize("be", BACKENDS)
@pytest.mark.parametrize("op", ["erode", "dilate"])
def test_morphology_matches_oracle(be, op):
    rng = np.random.default_rng(0)
    m = rng.random((7, 8, 9)) > 0.4
    for se in (StructuringElement.ball(1, 3), StructuringElement.ball(1.5, 3), StructuringElement.disk(2, 3)):
        out = binary_morphology(to_backend(NdImage(m), be), se, op).data
        np.testing.assert_array_equal(out, minkowski_oracle(m, se, op))


@pytest.mark.parametrize("be", BACKENDS)
def test_open_preserves_solid_interior(be):
    m = np.zeros((9, 9, 9), bool)
    m[1:8, 1:8, 1:8] = True
    out = binary_morphology(to_backend(NdImage(m), be), StructuringElement.ball(1, 3), "open").data
    assert out[2:7, 2:7, 2:7].all()


@pytest.mark.parametrize("be", BACKENDS)
def test_erode_empty(be):
    out = binary_morphology(to_backend(NdImage(np.zeros((4, 4, 4), bool)), be), StructuringElement.ball(1, 3), "erode")
    assert not out.data.any()


@pytest.mark.parametrize("be", BACKENDS)
def test_close_merges_one_voxel_gap(be):
    m = np.zeros((9, 9, 16), bool)
    m[2:7, 2:7, 2:7] = True
    m[2:7, 2:7, 8:13] = True
    se = StructuringElement.ball(1, 3)
    out = binary_morphology(to_backend(NdImage(m), be), se, "close").data
    # oracle on the unbounded domain: pad, dilate, erode, crop
    pad = np.pad(m, 1)
    expected = minkowski_oracle(minkowski_oracle(pad, se, "dilate"), se, "erode")[1:-1, 1:-1, 1:-1]
    np.testing.assert_array_equal(out, expected)
    assert out[4, 4, 7]


@given(hnp.arrays(np.bool_, (6, 7, 7)), st.sampled_from([1, 1.5, 2]))
def test_erode_dilate_duality_interior(m, r):
    se = StructuringElement.ball(r, 3)
    er = binary_morphology(NdImage(m), se, "erode").data
    dual = ~binary_morphology(NdImage(~m), se, "dilate").data
    k = int(r)
    inner = (slice(k, -k),) * 3
    np.testing.assert_array_equal(er[inner], dual[inner])


@given(hnp.arrays(np.bool_, (6, 7, 7)), st.sampled_from(["open", "close"]))
def test_open_close_idempotent(m, op):
    se = StructuringElement.ball(1, 3)
    for be in BACKENDS:
        once = binary_morphology(to_backend(NdImage(m), be), se, op)
        twice = binary_morphology(once, se, op)
        np.testing.assert_array_equal(once.data, twice.data)
    if op == "close":
        assert np.all(once.data >= m)
    else:
        assert np.all(once.data <= m)


def test_unknown_op():
    with pytest.raises(ValueError):
        binary_morphology(NdImage(np.zeros((3, 3, 3), bool)), StructuringElement.ball(1, 3), "thin")


# ---------------------------------------------------------------------------
# fill_holes / remove_small_objects


def hollow_cube():
    m = np.zeros((9, 9, 9), bool)
    m[2:7, 2:7, 2:7] = True
    m[3:6, 3:6, 3:6] = False
    return m


@pytest.mark.parametrize("be", BACKENDS)
def test_fill_holes_threshold(be):
    m = hollow_cube()
    img = to_backend(NdImage(m), be)
    np.testing.assert_array_equal(fill_holes(img, 20).data, m)
    solid = np.zeros_like(m)
    solid[2:7, 2:7, 2:7] = True
    np.testing.assert_array_equal(fill_holes(img, 30).data, solid)


def test_fill_holes_border_cavity_never_filled():
    m = np.ones((6, 6, 6), bool)
    m[0:2, 2:4, 2:4] = False  # cavity open to the z=0 face
    np.testing.assert_array_equal(fill_holes(NdImage(m), math.inf).data, m)


@given(hnp.arrays(np.bool_, (6, 6, 6)), st.integers(0, 20), st.integers(0, 20))
def test_fill_holes_idempotent_and_monotone(m, a, b):
    lo, hi = min(a, b), max(a, b)
    f_lo = fill_holes(NdImage(m), lo).data
    f_hi = fill_holes(NdImage(m), hi).data
    assert np.all(f_lo <= f_hi) and np.all(m <= f_lo)
    np.testing.assert_array_equal(fill_holes(NdImage(f_lo), lo).data, f_lo)


def test_remove_small_objects_examples():
    lab = np.zeros((10, 10, 10), np.uint32)
    lab.flat[:49] = 1
    lab.flat[100:200] = 2
    out = remove_small_objects(NdImage(lab), 50).data
    assert 1 not in out and np.all(out[lab == 2] == 2)
    np.testing.assert_array_equal(remove_small_objects(NdImage(lab), 0).data, lab)

    lab = np.zeros(200, np.uint32)
    lab[:10] = 3
    lab[50:150] = 7
    out = remove_small_objects(NdImage(lab), 50).data
    assert set(np.unique(out)) == {0, 7}


@given(hnp.arrays(np.uint8, 60, elements=st.integers(0, 5)), st.integers(0, 20), st.integers(0, 20))
def test_remove_small_idempotent_monotone(lab, a, b):
    lo, hi = min(a, b), max(a, b)
    img = NdImage(lab.astype(np.uint32))
    r_lo = remove_small_objects(img, lo).data
    r_hi = remove_small_objects(img, hi).data
    assert np.all((r_hi > 0) <= (r_lo > 0))
    np.testing.assert_array_equal(remove_small_objects(NdImage(r_lo), lo).data, r_lo)
