import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelkit.core import ACCELERATED, REFERENCE, NdImage, to_backend
from voxelkit.deconv import (
    STOP_CONVERGED,
    STOP_MAX_ITERS,
    StoppingRule,
    poisson_log_likelihood,
    prepare_problem,
    prepare_psf,
    richardson_lucy,
    rl_step,
)
from voxelkit.errors import NegativeInput, ShapeMismatch, UnnormalizedPsf
from voxelkit.filters import fft_convolve
from voxelkit.iosynth import SynthSpec, gaussian_psf, generate_blobs

from conftest import f32, rel_maxdiff

BACKENDS = [REFERENCE, ACCELERATED]


def delta_psf(shape=(3, 3, 3)) -> NdImage:
    k = np.zeros(shape, np.float32)
    k[tuple(n // 2 for n in shape)] = 1.0
    return NdImage(k)


def padded_blobs(seed=2, pad=(6, 10, 10)) -> np.ndarray:
    img, _ = generate_blobs(SynthSpec(shape=(16, 48, 48), n_objects=5, radius_range=(3, 6), noise_sigma=0, seed=seed))
    return np.pad(img.data.astype(np.float64) * 1000, [(p, p) for p in pad])


@pytest.fixture(scope="module")
def blurred():
    psf = gaussian_psf((9, 17, 17), (1.0, 2.0, 2.0))
    truth = padded_blobs()
    b = fft_convolve(NdImage(truth.astype(np.float32)), psf).data
    return truth, b, psf


# ---------------------------------------------------------------------------
# single step


@pytest.mark.parametrize("be", BACKENDS)
def test_delta_psf_returns_observation(be):
    rng = np.random.default_rng(0)
    y = rng.random((8, 12, 12)).astype(np.float32) + 0.5
    # SSIM against the previous iterate is 1 up to round-off once nothing moves
    rule = StoppingRule(metric="ssim_vs_prev", patience=2, max_iters=20)
    est, trace = richardson_lucy(to_backend(NdImage(y), be), to_backend(delta_psf(), be), rule)
    np.testing.assert_allclose(est.data, y, rtol=1e-5)
    assert trace.stop_reason == STOP_CONVERGED
    assert len(trace) == rule.patience + 1


@pytest.mark.parametrize("be", BACKENDS)
def test_step_fixed_point(be):
    # a latent supported away from the border is reproduced by one step on its own blur
    psf = gaussian_psf((5, 7, 7), (1.0, 1.5, 1.5))
    latent = np.zeros((14, 24, 24))
    latent[4:10, 6:18, 6:18] = np.random.default_rng(1).random((6, 12, 12)) + 1.0
    e = to_backend(NdImage(latent.astype(np.float32)), be)
    fwd, bwd = prepare_psf(to_backend(psf, be), e.shape)
    obs = fft_convolve(NdImage(latent), psf).data
    out = rl_step(e, to_backend(NdImage(obs), be), fwd, bwd).data
    assert rel_maxdiff(out, latent) <= 1e-4


@pytest.mark.parametrize("be", BACKENDS)
def test_step_matches_unfused_composition(be):
    rng = np.random.default_rng(3)
    psf = gaussian_psf((3, 5, 5), (0.8, 1.2, 1.2))
    e = rng.random((8, 14, 14)).astype(np.float32) + 0.1
    y = rng.random((8, 14, 14)).astype(np.float32) + 0.1
    flipped = psf.data[::-1, ::-1, ::-1]
    blur = fft_convolve(f32(e), psf).data.astype(np.float64)
    back = fft_convolve(f32(y / blur), flipped).data.astype(np.float64)
    expected = e * np.maximum(back, 0)
    ei = to_backend(NdImage(e), be)
    fwd, bwd = prepare_psf(to_backend(psf, be), e.shape)
    out = rl_step(ei, to_backend(NdImage(y), be), fwd, bwd).data
    assert rel_maxdiff(out, expected) <= 1e-5


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_step_nonnegative(seed):
    rng = np.random.default_rng(seed)
    psf = gaussian_psf((3, 3, 3), 0.8)
    e = rng.random((5, 6, 7)).astype(np.float32) * (rng.random((5, 6, 7)) > 0.3)
    y = rng.poisson(5, (5, 6, 7)).astype(np.float32)
    for be in BACKENDS:
        fwd, bwd = prepare_psf(to_backend(psf, be), e.shape)
        out = rl_step(to_backend(NdImage(e), be), to_backend(NdImage(y), be), fwd, bwd).data
        assert out.min() >= 0
        assert np.all(out[e == 0] == 0)


def test_step_shape_checks():
    psf = gaussian_psf((3, 3, 3), 1.0)
    fwd, bwd = prepare_psf(psf, (4, 4, 4))
    with pytest.raises(ShapeMismatch):
        rl_step(f32(np.ones((4, 4, 4))), f32(np.ones((4, 4, 5))), fwd, bwd)
    with pytest.raises(ShapeMismatch):
        rl_step(f32(np.ones((5, 5, 5))), f32(np.ones((5, 5, 5))), fwd, bwd)


# ---------------------------------------------------------------------------
# input validation


def test_negative_observed_rejected():
    y = np.ones((4, 6, 6), np.float32)
    y[1, 1, 1] = -0.5
    with pytest.raises(NegativeInput):
        richardson_lucy(NdImage(y), delta_psf())


def test_roundoff_negatives_tolerated():
    y = np.ones((4, 6, 6), np.float32) * 100
    y[1, 1, 1] = -1e-6
    est, _ = richardson_lucy(NdImage(y), delta_psf(), StoppingRule(max_iters=1))
    assert est.data.min() >= 0


def test_psf_errors():
    y = f32(np.ones((4, 6, 6)))
    with pytest.raises(UnnormalizedPsf):
        richardson_lucy(y, NdImage(delta_psf().data * 2))
    k = delta_psf().data.copy()
    k[0, 0, 0] = -0.1
    k[1, 1, 1] = 1.1
    with pytest.raises(NegativeInput):
        richardson_lucy(y, NdImage(k))
    with pytest.raises(ShapeMismatch):
        richardson_lucy(y, NdImage(np.ones((1, 1), np.float32)))


def test_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule(metric="mse")
    with pytest.raises(ValueError):
        StoppingRule(rel_tol=0)
    with pytest.raises(ValueError):
        StoppingRule(patience=0)
    with pytest.raises(ValueError):
        richardson_lucy(f32(np.ones((3, 4, 4))), delta_psf(), init="zeros")


# ---------------------------------------------------------------------------
# stopping and trace


def test_trace_iterations_and_csv():
    y = f32(np.random.default_rng(4).random((8, 10, 10)) + 0.5)
    psf = gaussian_psf((3, 3, 3), 0.7)
    _, trace = richardson_lucy(y, psf, StoppingRule(metric="ssim_vs_prev", rel_tol=1e-12, max_iters=5))
    assert [r.iter for r in trace.records] == [1, 2, 3, 4, 5]
    assert trace.stop_reason == STOP_MAX_ITERS
    lines = trace.to_csv().splitlines()
    assert lines[0] == "iter,metric,value,wall_time_s"
    assert len(lines) == 6
    walls = [r.wall_time_s for r in trace.records]
    assert walls == sorted(walls)

    _, one = richardson_lucy(y, psf, StoppingRule(max_iters=1))
    assert len(one) == 1


@pytest.mark.parametrize("patience", [1, 3])
def test_infinite_tolerance_stops_after_patience(patience):
    y = f32(np.random.default_rng(5).random((6, 10, 10)) + 0.5)
    rule = StoppingRule(metric="si_psnr_vs_input", rel_tol=np.inf, patience=patience, max_iters=50)
    _, trace = richardson_lucy(y, gaussian_psf((3, 3, 3), 0.7), rule)
    assert len(trace) == patience + 1
    assert trace.stop_reason == STOP_CONVERGED


@pytest.mark.parametrize("metric", ["si_psnr_vs_input", "ssim_vs_prev", "frc_resolution"])
def test_backend_traces_agree(metric, blurred):
    _, b, psf = blurred
    obs = np.random.default_rng(0).poisson(np.maximum(b, 0)).astype(np.float32)
    rule = StoppingRule(metric=metric, rel_tol=1e-12, max_iters=6)
    traces = [richardson_lucy(to_backend(NdImage(obs), be), to_backend(psf, be), rule)[1] for be in BACKENDS]
    for r, a in zip(*[t.values for t in traces]):
        if np.isfinite(r) or np.isfinite(a):
            assert abs(a - r) <= 1e-3 * max(abs(r), 1e-12)


@pytest.mark.parametrize("be", BACKENDS)
def test_flux_conserved(be, blurred):
    _, b, psf = blurred
    obs = np.random.default_rng(1).poisson(np.maximum(b, 0)).astype(np.float32)
    est, _ = richardson_lucy(to_backend(NdImage(obs), be), to_backend(psf, be),
                             StoppingRule(rel_tol=1e-12, max_iters=30))
    assert abs(est.data.astype(np.float64).sum() / obs.astype(np.float64).sum() - 1.0) <= 0.01


@pytest.mark.parametrize("be", BACKENDS)
def test_likelihood_nondecreasing(be, blurred):
    _, b, psf = blurred
    obs = to_backend(NdImage(np.maximum(b, 0).astype(np.float32)), be)
    problem = prepare_problem(obs, to_backend(psf, be))
    e = problem.observed
    values = [poisson_log_likelihood(problem, e, psf)]
    for _ in range(10):
        e = rl_step(e, problem.observed, problem.forward, problem.backward)
        values.append(poisson_log_likelihood(problem, e, psf))
    for prev, cur in zip(values, values[1:]):
        assert cur >= prev - 1e-7 * abs(prev)


def test_deconvolution_sharpens(blurred):
    truth, b, psf = blurred
    est, _ = richardson_lucy(NdImage(np.maximum(b, 0).astype(np.float32)), psf,
                             StoppingRule(rel_tol=1e-12, max_iters=20))
    err_obs = np.abs(b - truth).sum()
    err_est = np.abs(est.data - truth).sum()
    assert err_est < err_obs
