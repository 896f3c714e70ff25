"""Smoothing and rank filters: Gaussian, median and FFT convolution."""

from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from ._compiled import HAVE_COMPILED, as3d, axis_view, kernels, offsets3d
from .core import ACCELERATED, NdImage, dispatch, register, thread_count
from .errors import KernelTooLarge


@dataclass(frozen=True)
class StructuringElement:
    """Binary footprint given as integer offsets from the origin.

    `kind` is ``"ball"`` (N-D Euclidean ball), ``"disk"`` (ball in the last
    two axes, zero extent elsewhere) or ``"custom"``.
    """

    offsets: np.ndarray = field(compare=False)
    radius: float = 0.0
    kind: str = "custom"
    _key: tuple = field(init=False, repr=False, compare=True)

    def __post_init__(self):
        off = np.array(self.offsets, dtype=np.int64, ndmin=2)
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "_key", tuple(map(tuple, off.tolist())))

    @classmethod
    def ball(cls, radius: float, ndim: int = 3) -> "StructuringElement":
        r = int(math.floor(radius))
        rng = range(-r, r + 1)
        offs = [o for o in itertools.product(rng, repeat=ndim) if sum(c * c for c in o) <= radius * radius]
        return cls(np.array(offs, dtype=np.int64), float(radius), "ball")

    @classmethod
    def disk(cls, radius: float, ndim: int = 3) -> "StructuringElement":
        if ndim < 2:
            raise ValueError("a disk needs at least two axes")
        plane = cls.ball(radius, 2).offsets
        offs = np.zeros((len(plane), ndim), dtype=np.int64)
        offs[:, -2:] = plane
        return cls(offs, float(radius), "disk")

    @property
    def ndim(self) -> int:
        return self.offsets.shape[1]

    @property
    def reach(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.abs(self.offsets).max(axis=0))

    def __len__(self) -> int:
        return len(self.offsets)


def reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Whole-sample symmetric extension (edge value not repeated)."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _per_axis(value, ndim: int, name: str) -> tuple[float, ...]:
    if np.ndim(value) == 0:
        return (float(value),) * ndim
    vals = tuple(float(v) for v in value)
    if len(vals) != ndim:
        raise ValueError(f"{name} needs {ndim} entries, got {len(vals)}")
    return vals


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    half = int(math.ceil(truncate * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


# ---------------------------------------------------------------------------
# gaussian


def gaussian(img: NdImage, sigma, truncate: float = 4.0) -> NdImage:
    """Separable Gaussian blur with reflect boundaries; output is f32."""
    return dispatch("gaussian", img, sigma, truncate=truncate)


def _gaussian_plan(img: NdImage, sigma, truncate: float) -> list[tuple[int, np.ndarray]]:
    sigmas = _per_axis(sigma, img.ndim, "sigma")
    if any(s < 0 for s in sigmas):
        raise ValueError(f"sigma must be non-negative, got {sigmas}")
    return [(ax, gaussian_kernel1d(s, truncate)) for ax, s in enumerate(sigmas) if s > 0]


def gaussian_array(x: np.ndarray, sigma, truncate: float = 4.0) -> np.ndarray:
    """Float64 reflect-boundary Gaussian of a plain array (shared by metrics)."""
    sigmas = _per_axis(sigma, x.ndim, "sigma")
    x = np.asarray(x, dtype=np.float64)
    for axis, s in enumerate(sigmas):
        if s <= 0:
            continue
        w = gaussian_kernel1d(s, truncate)
        n, half = x.shape[axis], len(w) // 2
        padded = np.take(x, reflect_indices(np.arange(-half, n + half), n), axis=axis)
        out = np.zeros_like(x)
        for k, wk in enumerate(w):
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(k, k + n)
            out += wk * padded[tuple(sl)]
        x = out
    return x


@register("gaussian")
def _gaussian_ref(img: NdImage, sigma, truncate: float = 4.0) -> NdImage:
    _gaussian_plan(img, sigma, truncate)
    return img.derive(gaussian_array(img.data, sigma, truncate).astype(np.float32))


def _gaussian_acc(img: NdImage, sigma, truncate: float = 4.0) -> NdImage:
    x = np.array(img.data, dtype=np.float32, order="C")
    nt = thread_count()
    for axis, w in _gaussian_plan(img, sigma, truncate):
        out = np.empty_like(x)
        kernels.convolve_axis(axis_view(x, axis), w, axis_view(out, axis), nt)
        x = out
    return img.derive(x)


# ---------------------------------------------------------------------------
# median


def median(img: NdImage, se: StructuringElement) -> NdImage:
    """Lower median over the in-bounds part of `se` around each voxel."""
    return dispatch("median", img, se)


def _check_se(img: NdImage, se: StructuringElement) -> None:
    if se.ndim != img.ndim:
        raise ValueError(f"structuring element is {se.ndim}-D, image is {img.ndim}-D")


@register("median")
def _median_ref(img: NdImage, se: StructuringElement) -> NdImage:
    _check_se(img, se)
    x = img.data.astype(np.float64)
    reach = se.reach
    padded = np.pad(x, [(r, r) for r in reach], constant_values=np.nan)
    K = len(se)
    out = np.empty(x.shape, dtype=np.float64)
    plane = int(np.prod(x.shape[1:]))
    step = max(1, (8_000_000 // max(1, K * plane)))
    for z0 in range(0, x.shape[0], step):
        z1 = min(x.shape[0], z0 + step)
        stack = np.empty((z1 - z0,) + x.shape[1:] + (K,), dtype=np.float64)
        for k, off in enumerate(se.offsets):
            sl = [slice(z0 + reach[0] + off[0], z1 + reach[0] + off[0])]
            sl += [slice(r + o, r + o + n) for r, o, n in zip(reach[1:], off[1:], x.shape[1:])]
            stack[..., k] = padded[tuple(sl)]
        stack.sort(axis=-1)  # NaN (out of bounds) sorts last
        count = K - np.isnan(stack).sum(axis=-1)
        out[z0:z1] = np.take_along_axis(stack, ((count - 1) // 2)[..., None], axis=-1)[..., 0]
    return img.derive(out.astype(img.data.dtype))


def _median_acc(img: NdImage, se: StructuringElement) -> NdImage:
    _check_se(img, se)
    if img.ndim > 3:
        return _median_ref(img, se)
    work = np.float64 if img.elem == "u32" else np.float32
    x = np.ascontiguousarray(img.data, dtype=work)
    out = np.empty_like(x)
    kernels.median_filter(as3d(x), offsets3d(se.offsets), as3d(out), thread_count())
    return img.derive(out.astype(img.data.dtype))


# ---------------------------------------------------------------------------
# FFT convolution


def next_fast_length(n: int) -> int:
    """Smallest m >= n whose prime factors are all in {2, 3, 5, 7}."""
    m = max(1, int(n))
    while True:
        r = m
        for p in (2, 3, 5, 7):
            while r % p == 0:
                r //= p
        if r == 1:
            return m
        m += 1


def fft_plan(img_shape: Sequence[int], kernel_shape: Sequence[int], circular: bool) -> tuple[int, ...]:
    """Transform shape used by :func:`fft_convolve` (recorded in reports)."""
    if circular:
        return tuple(img_shape)
    return tuple(next_fast_length(n + k - 1) for n, k in zip(img_shape, kernel_shape))


def centered_kernel(kernel: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Zero-pad `kernel` to `shape` with its centre index ``k // 2`` at the origin."""
    padded = np.zeros(shape, dtype=kernel.dtype)
    padded[tuple(slice(0, k) for k in kernel.shape)] = kernel
    return np.roll(padded, [-(k // 2) for k in kernel.shape], axis=tuple(range(kernel.ndim)))


def fft_convolve(img: NdImage, kernel, circular: bool = False) -> NdImage:
    """Convolve `img` with `kernel` via FFT; output has the shape of `img`.

    Linear mode zero-pads and crops the ``same``-sized window around the
    kernel centre (index ``k // 2`` per axis); circular mode wraps around.
    """
    return dispatch("fft_convolve", img, kernel, circular=circular)


def _kernel_array(img: NdImage, kernel, circular: bool) -> np.ndarray:
    k = kernel.data if isinstance(kernel, NdImage) else np.asarray(kernel)
    if k.ndim != img.ndim:
        raise ValueError(f"kernel is {k.ndim}-D, image is {img.ndim}-D")
    if circular and any(ks > s for ks, s in zip(k.shape, img.shape)):
        raise KernelTooLarge(f"kernel {k.shape} exceeds image {img.shape} in circular mode")
    return k


def _crop_same(full: np.ndarray, img_shape, kernel_shape) -> np.ndarray:
    return full[tuple(slice(k // 2, k // 2 + n) for n, k in zip(img_shape, kernel_shape))]


@register("fft_convolve")
def _fft_convolve_ref(img: NdImage, kernel, circular: bool = False) -> NdImage:
    k = _kernel_array(img, kernel, circular).astype(np.float64)
    a = img.data.astype(np.float64)
    shape = fft_plan(a.shape, k.shape, circular)
    axes = tuple(range(a.ndim))
    if circular:
        spec = np.fft.rfftn(a, shape, axes) * np.fft.rfftn(centered_kernel(k, shape), shape, axes)
        return img.derive(np.fft.irfftn(spec, shape, axes).astype(np.float32))
    spec = np.fft.rfftn(a, shape, axes) * np.fft.rfftn(k, shape, axes)
    full = np.fft.irfftn(spec, shape, axes)
    return img.derive(_crop_same(full, a.shape, k.shape).astype(np.float32))


@register("fft_convolve", ACCELERATED)
def _fft_convolve_acc(img: NdImage, kernel, circular: bool = False) -> NdImage:
    k = _kernel_array(img, kernel, circular).astype(np.float32)
    a = img.data.astype(np.float32)
    shape = fft_plan(a.shape, k.shape, circular)
    axes = tuple(range(a.ndim))
    nt = thread_count()
    if circular:
        k = centered_kernel(k, shape)
    spec = scipy.fft.rfftn(a, shape, axes=axes, workers=nt)
    spec *= scipy.fft.rfftn(k, shape, axes=axes, workers=nt)
    full = scipy.fft.irfftn(spec, shape, axes=axes, workers=nt)
    if circular:
        return img.derive(full.astype(np.float32))
    return img.derive(_crop_same(full, a.shape, k.shape).astype(np.float32))


if HAVE_COMPILED:
    register("gaussian", ACCELERATED)(_gaussian_acc)
    register("median", ACCELERATED)(_median_acc)
