"""Richardson-Lucy deconvolution with metric-guided stopping."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
import scipy.fft

from .core import ACCELERATED, DIV_EPSILON, NdImage, dispatch, register, thread_count, to_backend
from .errors import NegativeInput, ShapeMismatch, UnnormalizedPsf
from .filters import fft_plan
from .metrics import si_psnr, single_image_frc, ssim

METRICS = ("si_psnr_vs_input", "ssim_vs_prev", "frc_resolution")
STOP_CONVERGED = "converged"
STOP_MAX_ITERS = "max_iters"
PSF_SUM_TOL = 1e-3
# negatives down to this fraction of max|observed| count as round-off
NEGATIVE_RTOL = 1e-6


@dataclass(frozen=True)
class StoppingRule:
    """Stop after `patience` consecutive iterations whose metric changes by
    less than `rel_tol` relative to the previous value, or at `max_iters`."""

    metric: str = "frc_resolution"
    rel_tol: float = 1e-3
    patience: int = 3
    max_iters: int = 100

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.patience < 1 or self.max_iters < 1:
            raise ValueError("patience and max_iters must be >= 1")


class TraceRecord(NamedTuple):
    iter: int
    metric: str
    value: float
    wall_time_s: float


@dataclass
class IterationTrace:
    records: list[TraceRecord] = field(default_factory=list)
    stop_reason: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    def append(self, metric: str, value: float, wall_time_s: float) -> None:
        self.records.append(TraceRecord(len(self.records) + 1, metric, float(value), float(wall_time_s)))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def values(self) -> list[float]:
        return [r.value for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TraceRecord._fields)
        for r in self.records:
            w.writerow([r.iter, r.metric, repr(r.value), f"{r.wall_time_s:.6f}"])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# transfer functions


class Transfer(NamedTuple):
    """Half-spectrum of a zero-padded kernel and the shapes it was built for."""

    values: np.ndarray
    fft_shape: tuple[int, ...]
    kernel_shape: tuple[int, ...]


def prepare_psf(psf: NdImage, image_shape) -> tuple[Transfer, Transfer]:
    """Spectra of `psf` and of its mirror image for linear convolution with
    images of `image_shape` (computed once per run)."""
    return dispatch("prepare_psf", psf, tuple(image_shape))


def _transfers(psf: np.ndarray, image_shape, rfftn) -> tuple[Transfer, Transfer]:
    shape = fft_plan(image_shape, psf.shape, circular=False)
    flipped = psf[tuple(slice(None, None, -1) for _ in range(psf.ndim))]
    # mirroring about the centre index k // 2 (not (k - 1) / 2) so that both
    # kernels crop with the same k // 2 offset
    shift = tuple(2 * (k // 2) - (k - 1) for k in psf.shape)
    flipped = np.pad(flipped, [(s, 0) for s in shift])
    return (Transfer(rfftn(psf, shape), shape, psf.shape),
            Transfer(rfftn(flipped, shape), shape, flipped.shape))


@register("prepare_psf")
def _prepare_ref(psf: NdImage, image_shape) -> tuple[Transfer, Transfer]:
    k = psf.data.astype(np.float64)
    return _transfers(k, image_shape, lambda a, s: np.fft.rfftn(a, s, axes=tuple(range(a.ndim))))


@register("prepare_psf", ACCELERATED)
def _prepare_acc(psf: NdImage, image_shape) -> tuple[Transfer, Transfer]:
    k = psf.data.astype(np.float32)
    nt = thread_count()
    return _transfers(k, image_shape, lambda a, s: scipy.fft.rfftn(a, s, workers=nt))


# ---------------------------------------------------------------------------
# one update


def rl_step(estimate: NdImage, observed: NdImage, psf_fft: Transfer, psf_flipped_fft: Transfer) -> NdImage:
    """``e * ((observed / max(e * psf, eps)) * psf_flipped)`` with FFT convolutions."""
    return dispatch("rl_step", estimate, observed, psf_fft, psf_flipped_fft)


def _check_step(estimate: NdImage, observed: NdImage, fwd: Transfer, bwd: Transfer):
    if estimate.shape != observed.shape:
        raise ShapeMismatch(f"estimate {estimate.shape} vs observed {observed.shape}")
    expected = fft_plan(estimate.shape, fwd.kernel_shape, circular=False)
    if fwd.fft_shape != expected or bwd.fft_shape != expected:
        raise ShapeMismatch(f"transfer functions were built for {fwd.fft_shape}, need {expected}")


def _crop(full: np.ndarray, shape, kshape) -> np.ndarray:
    return full[tuple(slice(k // 2, k // 2 + n) for n, k in zip(shape, kshape))]


@register("rl_step")
def _rl_step_ref(estimate: NdImage, observed: NdImage, psf_fft: Transfer, psf_flipped_fft: Transfer) -> NdImage:
    _check_step(estimate, observed, psf_fft, psf_flipped_fft)
    e = estimate.data.astype(np.float64)
    y = observed.data.astype(np.float64)
    shape, axes = psf_fft.fft_shape, tuple(range(e.ndim))
    blur = _crop(np.fft.irfftn(np.fft.rfftn(e, shape, axes) * psf_fft.values, shape, axes), e.shape, psf_fft.kernel_shape)
    ratio = y / np.maximum(blur, DIV_EPSILON)
    back = np.fft.irfftn(np.fft.rfftn(ratio, shape, axes) * psf_flipped_fft.values, shape, axes)
    back = _crop(back, e.shape, psf_flipped_fft.kernel_shape)
    return estimate.derive((e * np.maximum(back, 0.0)).astype(np.float32))


@register("rl_step", ACCELERATED)
def _rl_step_acc(estimate: NdImage, observed: NdImage, psf_fft: Transfer, psf_flipped_fft: Transfer) -> NdImage:
    _check_step(estimate, observed, psf_fft, psf_flipped_fft)
    nt = thread_count()
    e = estimate.data
    shape, axes = psf_fft.fft_shape, tuple(range(e.ndim))
    spec = scipy.fft.rfftn(e, shape, axes=axes, workers=nt)
    spec *= psf_fft.values
    blur = _crop(scipy.fft.irfftn(spec, shape, axes=axes, workers=nt, overwrite_x=True), e.shape,
                 psf_fft.kernel_shape)
    ratio = np.maximum(blur, np.float32(DIV_EPSILON))
    np.divide(observed.data, ratio, out=ratio)
    spec = scipy.fft.rfftn(ratio, shape, axes=axes, workers=nt, overwrite_x=True)
    spec *= psf_flipped_fft.values
    back = _crop(scipy.fft.irfftn(spec, shape, axes=axes, workers=nt, overwrite_x=True), e.shape,
                 psf_flipped_fft.kernel_shape)
    out = np.maximum(back, np.float32(0.0))
    out *= e
    return estimate.derive(out)


# ---------------------------------------------------------------------------
# driver


def check_psf(psf: NdImage) -> None:
    p = psf.data
    if np.any(p < 0):
        raise NegativeInput("PSF has negative values")
    total = float(p.astype(np.float64).sum())
    if abs(total - 1.0) > PSF_SUM_TOL:
        raise UnnormalizedPsf(f"PSF sums to {total:.6g}, expected 1 within {PSF_SUM_TOL}")


class RLProblem(NamedTuple):
    """Padded working copy of the observation plus the PSF spectra."""

    observed: NdImage
    forward: Transfer
    backward: Transfer
    crop: tuple[slice, ...]


def prepare_problem(observed: NdImage, psf: NdImage) -> RLProblem:
    """Edge-replicate `observed` by half the PSF extent and build transfers."""
    if observed.ndim != psf.ndim:
        raise ShapeMismatch(f"observed is {observed.ndim}-D, PSF is {psf.ndim}-D")
    data = observed.data.astype(np.float32)
    floor = -NEGATIVE_RTOL * float(np.abs(data).max(initial=0.0))
    if np.any(data < floor):
        raise NegativeInput("observed image has negative values")
    check_psf(psf)
    pad = [(k // 2, k // 2) for k in psf.shape]
    # FFT round-off negatives are clamped to zero
    padded = observed.derive(np.pad(np.maximum(data, 0.0), pad, mode="edge"), spacing=observed.spacing)
    fwd, bwd = prepare_psf(to_backend(psf, observed.backend), padded.shape)
    crop = tuple(slice(k // 2, k // 2 + n) for k, n in zip(psf.shape, observed.shape))
    return RLProblem(padded, fwd, bwd, crop)


def poisson_log_likelihood(problem: RLProblem, estimate: NdImage, psf: NdImage) -> float:
    """Poisson log-likelihood (up to a constant) that each update increases.

    The model blurs `estimate` by full linear convolution and observes the
    padded data on its window with zero counts beyond it, so the value is
    ``sum(y * log(A e)) - sum(A e)`` with the second sum over the full
    support, which equals ``sum(e)`` for a unit-sum PSF.  Float64 throughout.
    """
    e = estimate.data.astype(np.float64)
    y = problem.observed.data.astype(np.float64)
    k = psf.data.astype(np.float64)
    shape = fft_plan(e.shape, k.shape, circular=False)
    axes = tuple(range(e.ndim))
    full = np.fft.irfftn(np.fft.rfftn(e, shape, axes) * np.fft.rfftn(k, shape, axes), shape, axes)
    blur = np.maximum(_crop(full, e.shape, k.shape), DIV_EPSILON)
    return float(np.sum(y * np.log(blur)) - e.sum() * k.sum())


def _even_crop(x: np.ndarray) -> np.ndarray:
    return x[..., : x.shape[-2] // 2 * 2, : x.shape[-1] // 2 * 2]


def _metric(name: str, estimate: np.ndarray, previous: np.ndarray, observed: np.ndarray, spacing: float) -> float:
    if name == "si_psnr_vs_input":
        return si_psnr(estimate, observed)
    if name == "ssim_vs_prev":
        return ssim(estimate, previous, float(previous.max() - previous.min()) or 1.0)
    return single_image_frc(_even_crop(estimate), spacing)


def _relative_change(new: float, old: float) -> float:
    if new == old:  # covers equal infinities
        return 0.0
    if not (math.isfinite(new) and math.isfinite(old)):
        return math.inf
    return abs(new - old) / abs(old) if old != 0 else math.inf


def richardson_lucy(observed: NdImage, psf: NdImage, rule: StoppingRule = StoppingRule(),
                    init: str = "observed") -> tuple[NdImage, IterationTrace]:
    """Deconvolve `observed` by `psf`, stopping per `rule`.

    The estimate starts from the observation (``init="flat"`` starts from
    its mean instead).  Iteration k is non-improving when the rule's metric
    moved by less than ``rel_tol`` relative to iteration k-1; the run stops
    after ``patience`` consecutive non-improving iterations ("converged") or
    at ``max_iters``.  The first iteration only sets the baseline.
    """
    if init not in ("observed", "flat"):
        raise ValueError(f"init must be 'observed' or 'flat', got {init!r}")
    problem = prepare_problem(observed, psf)
    y = problem.observed
    estimate = y if init == "observed" else y.derive(np.full(y.shape, float(y.data.mean()), np.float32))
    obs_crop = observed.data.astype(np.float64)
    spacing = float(observed.spacing[-1]) if observed.spacing is not None else 1.0
    trace = IterationTrace(metadata={
        "padding": "edge-replicate by psf_shape // 2, zero-padded linear FFT",
        "fft_shape": list(problem.forward.fft_shape),
        "init": init,
        "rule": {"metric": rule.metric, "rel_tol": rule.rel_tol, "patience": rule.patience,
                 "max_iters": rule.max_iters},
        "backend": observed.backend.value,
    })
    prev_img = estimate.data[problem.crop].astype(np.float64)
    prev_val = None
    stale = 0
    t0 = time.perf_counter()
    for _ in range(rule.max_iters):
        estimate = rl_step(estimate, y, problem.forward, problem.backward)
        cur = estimate.data[problem.crop].astype(np.float64)
        value = _metric(rule.metric, cur, prev_img, obs_crop, spacing)
        trace.append(rule.metric, value, time.perf_counter() - t0)
        if prev_val is not None:
            stale = stale + 1 if _relative_change(value, prev_val) < rule.rel_tol else 0
        prev_val, prev_img = value, cur
        if stale >= rule.patience:
            trace.stop_reason = STOP_CONVERGED
            break
    else:
        trace.stop_reason = STOP_MAX_ITERS
    result = observed.derive(estimate.data[problem.crop])
    return result, trace
