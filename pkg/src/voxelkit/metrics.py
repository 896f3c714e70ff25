"""Image-quality and segmentation-quality metrics.

Metrics evaluate results rather than produce them, so they are plain
functions computed in float64 on the host arrays whatever the backend tag;
the same numbers therefore come out for both backends.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from .core import NdImage
from .errors import DegenerateReference, OddExtent, ShapeMismatch, TooSmall
from .filters import gaussian_array

# squared-error floor (relative to data_range**2) below which the error is
# float round-off and PSNR is reported as inf (equivalent to > 200 dB)
MSE_FLOOR = 1e-20

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_MIN_EXTENT = 7

FRC_THRESHOLD = 1.0 / 7.0


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, NdImage) else x, dtype=np.float64)


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(x), _arr(ref)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# intensity metrics


def _psnr_from_mse(mse: float, data_range: float) -> float:
    if mse <= MSE_FLOOR * data_range * data_range:
        return math.inf
    return float(10.0 * math.log10(data_range * data_range / mse))


def psnr(x, ref, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio of `x` against `ref` in dB.

    `data_range` defaults to the range of `ref`, so the metric is not
    symmetric.  A zero error gives ``inf``.
    """
    a, b = _pair(x, ref)
    if data_range is None:
        data_range = float(b.max() - b.min())
    mse = float(np.mean((a - b) ** 2))
    return _psnr_from_mse(mse, float(data_range))


def affine_fit(x, ref) -> tuple[float, float]:
    """Least-squares ``(a, b)`` minimizing ``||a*x + b - ref||^2``."""
    a, b = _pair(x, ref)
    xm, rm = a.mean(), b.mean()
    xc = a - xm
    var = float(np.mean(xc * xc))
    if var == 0.0:
        return 0.0, float(rm)
    slope = float(np.mean(xc * (b - rm)) / var)
    return slope, float(rm - slope * xm)


def si_psnr(x, ref) -> float:
    """PSNR after the optimal affine intensity fit of `x` to `ref`."""
    a, b = _pair(x, ref)
    data_range = float(b.max() - b.min())
    if data_range == 0.0:
        raise DegenerateReference("reference image is constant")
    slope, offset = affine_fit(a, b)
    mse = float(np.mean((slope * a + offset - b) ** 2))
    return _psnr_from_mse(mse, data_range)


def local_moments(x, y, sigma: float = SSIM_SIGMA, truncate: float = SSIM_TRUNCATE):
    """Gaussian-windowed means, variances and covariance (population form)."""
    g = lambda v: gaussian_array(v, sigma, truncate)  # noqa: E731
    mx, my = g(x), g(y)
    vx = g(x * x) - mx * mx
    vy = g(y * y) - my * my
    cxy = g(x * y) - mx * my
    return mx, my, vx, vy, cxy


def ssim(x, ref, data_range: float | None = None) -> float:
    """Mean structural similarity with a Gaussian window (sigma 1.5, 3.5 sigma).

    `data_range` defaults to the range of `ref` (1 if `ref` is constant).
    """
    a, b = _pair(x, ref)
    if min(a.shape) < SSIM_MIN_EXTENT:
        raise TooSmall(f"ssim needs every extent >= {SSIM_MIN_EXTENT}, got {a.shape}")
    if data_range is None:
        data_range = float(b.max() - b.min()) or 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my, vx, vy, cxy = local_moments(a, b)
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Fourier ring / shell correlation


class FrcCurve(NamedTuple):
    """Correlation per ring; `frequency` is in cycles per pixel."""

    frequency: np.ndarray
    correlation: np.ndarray
    counts: np.ndarray


def _ring_index(shape, ring_width: float) -> tuple[np.ndarray, int, float]:
    extent = max(shape)
    grids = np.meshgrid(*[np.fft.fftfreq(n) * extent for n in shape], indexing="ij")
    rho = np.sqrt(sum(g * g for g in grids))
    idx = np.floor(rho / ring_width + 0.5).astype(np.int64)
    nrings = int(math.floor(extent / 2.0 / ring_width + 0.5)) + 1
    return idx, nrings, ring_width / extent


def _ring_sums(a: np.ndarray, b: np.ndarray, axes, ring_width: float):
    fa = np.fft.fftn(a, axes=axes)
    fb = np.fft.fftn(b, axes=axes)
    shape = tuple(a.shape[ax] for ax in axes)
    idx, nrings, step = _ring_index(shape, ring_width)
    # identical expressions for cross and self terms make frc(x, x) exactly 1
    terms = [(fa * np.conj(fb)).real, (fa * np.conj(fa)).real, (fb * np.conj(fb)).real]
    if a.ndim > len(axes):
        terms = [t.reshape((-1,) + shape).sum(axis=0) for t in terms]
    cross, ea, eb = terms
    keep = idx < nrings
    sel = idx[keep]
    sums = [np.bincount(sel, weights=v[keep], minlength=nrings) for v in (cross, ea, eb)]
    counts = np.bincount(sel, minlength=nrings)
    return sums, counts, step * np.arange(nrings)


def hann_window(shape) -> np.ndarray:
    """Separable periodic Hann window."""
    w = np.ones((1,) * len(shape))
    for ax, n in enumerate(shape):
        h = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
        w = w * h.reshape([-1 if k == ax else 1 for k in range(len(shape))])
    return w


def frc(a, b, ring_width: float = 1.0, per_slice: bool = False, window: str | None = None) -> FrcCurve:
    """Fourier ring (2-D) or shell (3-D) correlation of `a` and `b`.

    Rings are integer bins of radial frequency measured in samples of the
    largest extent.  With `per_slice`, a 3-D pair is correlated as 2-D
    planes whose ring sums are pooled over the first axis.  Rings without
    energy report nan.  ``window="hann"`` apodizes both images first; the
    default applies no window.
    """
    x, y = _pair(a, b)
    if x.ndim not in (2, 3):
        raise ValueError(f"frc needs 2-D or 3-D images, got {x.ndim}-D")
    axes = tuple(range(x.ndim - 2, x.ndim)) if per_slice and x.ndim == 3 else tuple(range(x.ndim))
    if window == "hann":
        w = hann_window([x.shape[ax] for ax in axes])
        x, y = x * w, y * w
    elif window is not None:
        raise ValueError(f"unknown window {window!r}; expected None or 'hann'")
    (cross, ea, eb), counts, freq = _ring_sums(x, y, axes, ring_width)
    den = np.sqrt(ea * eb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(den > 0, cross / np.where(den > 0, den, 1.0), np.nan)
    return FrcCurve(freq, np.clip(corr, -1.0, 1.0), counts)


def frc_resolution(curve: FrcCurve, spacing: float = 1.0, threshold: float = FRC_THRESHOLD) -> float:
    """Length at which the curve first drops below `threshold`.

    The DC ring is skipped.  The crossing frequency is interpolated linearly
    between the rings around the first drop; the result is
    ``spacing / frequency``.  A curve that never drops, or is already below
    the threshold at the first ring after DC, is unresolved (``inf``).
    """
    f = np.asarray(curve.frequency, dtype=np.float64)
    v = np.nan_to_num(np.asarray(curve.correlation, dtype=np.float64), nan=0.0)
    if len(v) < 2:
        return math.inf
    below = np.flatnonzero(v[1:] < threshold)
    if below.size == 0:
        return math.inf
    i = int(below[0]) + 1
    if i == 1:
        return math.inf
    t = (v[i - 1] - threshold) / (v[i - 1] - v[i])
    fc = f[i - 1] + t * (f[i] - f[i - 1])
    return float(spacing / fc) if fc > 0 else math.inf


def checkerboard_split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Even/even and odd/odd subsamples of the last two axes."""
    ny, nx = x.shape[-2:]
    if ny % 2 or nx % 2:
        raise OddExtent(f"single-image FRC needs even extents on the split axes, got {x.shape}")
    return x[..., 0::2, 0::2], x[..., 1::2, 1::2]


def single_image_frc(img, spacing: float = 1.0, threshold: float = FRC_THRESHOLD) -> float:
    """Resolution from the FRC between two checkerboard subsamples of one image.

    The subsamples have twice the pixel size.  3-D volumes are split plane
    by plane and the ring sums pooled over the first axis.
    """
    x = _arr(img)
    if x.ndim not in (2, 3):
        raise ValueError(f"single-image FRC needs 2-D or 3-D input, got {x.ndim}-D")
    a, b = checkerboard_split(x)
    curve = frc(a, b, per_slice=x.ndim == 3)
    return frc_resolution(curve, 2.0 * spacing, threshold)


# ---------------------------------------------------------------------------
# segmentation metrics


def iou_matrix(pred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU for every (pred id, truth id) pair of nonzero labels."""
    p = np.asarray(pred.data if isinstance(pred, NdImage) else pred).ravel().astype(np.int64)
    t = np.asarray(truth.data if isinstance(truth, NdImage) else truth).ravel().astype(np.int64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"label shapes differ: {p.shape} vs {t.shape}")
    pid = np.unique(p[p > 0])
    tid = np.unique(t[t > 0])
    if pid.size == 0 or tid.size == 0:
        return pid, tid, np.zeros((pid.size, tid.size))
    pi = np.searchsorted(pid, p)
    ti = np.searchsorted(tid, t)
    both = (p > 0) & (t > 0)
    inter = np.zeros((pid.size, tid.size))
    np.add.at(inter, (pi[both], ti[both]), 1.0)
    psize = np.bincount(pi[p > 0], minlength=pid.size).astype(np.float64)
    tsize = np.bincount(ti[t > 0], minlength=tid.size).astype(np.float64)
    union = psize[:, None] + tsize[None, :] - inter
    return pid, tid, inter / union


def average_precision(pred, truth, iou_threshold: float = 0.5) -> float:
    """``TP / (TP + FP + FN)`` after greedy one-to-one matching by IoU.

    Pairs are taken in descending IoU (ties by pred id, then truth id) and
    matched while both sides are free and IoU >= `iou_threshold`.  Two empty
    label images score 1.
    """
    pid, tid, iou = iou_matrix(pred, truth)
    if pid.size == 0 and tid.size == 0:
        return 1.0
    tp = 0
    if iou.size:
        pi, ti = np.nonzero(iou >= iou_threshold)
        order = np.lexsort((ti, pi, -iou[pi, ti]))
        used_p = np.zeros(pid.size, dtype=bool)
        used_t = np.zeros(tid.size, dtype=bool)
        for k in order:
            if not used_p[pi[k]] and not used_t[ti[k]]:
                used_p[pi[k]] = used_t[ti[k]] = True
                tp += 1
    fp = pid.size - tp
    fn = tid.size - tp
    return tp / (tp + fp + fn)


def masked_quality(intensity_a, intensity_b, labels_a, labels_b) -> tuple[float, float]:
    """PSNR and SSIM between intensities zeroed outside their label masks.

    `intensity_b` masked by `labels_b` is the reference.
    """
    a, b = _pair(intensity_a, intensity_b)
    la = np.asarray(labels_a.data if isinstance(labels_a, NdImage) else labels_a)
    lb = np.asarray(labels_b.data if isinstance(labels_b, NdImage) else labels_b)
    if la.shape != a.shape or lb.shape != a.shape:
        raise ShapeMismatch("labels and intensities must share one shape")
    ma = np.where(la > 0, a, 0.0)
    mb = np.where(lb > 0, b, 0.0)
    data_range = float(mb.max() - mb.min()) or 1.0
    return psnr(ma, mb, data_range), ssim(ma, mb, data_range)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    metric: str
    value: float
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        value = self.value if math.isfinite(self.value) else str(self.value)
        return {"metric": self.metric, "value": value, "params": self.params}


def reports_to_json(reports: list[MetricReport]) -> str:
    return json.dumps({"schema": 1, "metrics": [r.to_dict() for r in reports]}, indent=2, sort_keys=True)
