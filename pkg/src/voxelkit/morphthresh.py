"""Histogram thresholds and binary morphology."""

from __future__ import annotations

import math

import numpy as np

from ._compiled import HAVE_COMPILED
from .core import ACCELERATED, NdImage, dispatch, register
from .errors import DegenerateImage
from .filters import StructuringElement

TIE_RTOL = 1e-9


# ---------------------------------------------------------------------------
# thresholds


def histogram_edges(x: np.ndarray, bins: int) -> np.ndarray:
    """``bins + 1`` equal-width edges spanning ``[min(x), max(x)]``."""
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateImage("thresholding needs at least two distinct values")
    return lo + (hi - lo) * np.arange(bins + 1, dtype=np.float64) / bins


def _bin_stats(x: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # bin k holds values with edge[k] <= v < edge[k+1] (the last bin is closed),
    # so "v >= edge[k]" is exactly "bin index >= k"
    x = np.asarray(x, dtype=np.float64).ravel()
    edges = histogram_edges(x, bins)
    idx = np.searchsorted(edges[1:-1], x, side="right")
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=x, minlength=bins)
    return edges, counts, sums


def _pick(score: np.ndarray) -> int:
    # first candidate within a relative tie window of the best
    best = np.nanmax(score)
    return int(np.flatnonzero(score >= best - TIE_RTOL * abs(best))[0])


def otsu_threshold(img: NdImage, bins: int = 256) -> float:
    """Threshold maximizing between-class variance; foreground is ``img >= t``.

    Candidates are the inner edges of a ``bins``-bin histogram over
    ``[min, max]``; ties go to the lowest edge.
    """
    return dispatch("otsu_threshold", img, bins)


@register("otsu_threshold")
def _otsu_ref(img: NdImage, bins: int = 256) -> float:
    edges, counts, sums = _bin_stats(img.data, bins)
    n, total = counts.sum(), sums.sum()
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    w1 = n - w0
    s1 = total - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where((w0 > 0) & (w1 > 0), (s0 / w0 - s1 / w1) ** 2 * w0 * w1 / (n * n), -np.inf)
    return float(edges[1 + _pick(score)])


def multi_otsu(img: NdImage, classes: int = 3, bins: int = 256) -> list[float]:
    """``classes - 1`` increasing thresholds maximizing between-class variance."""
    return dispatch("multi_otsu", img, classes, bins)


def _class_term(w: np.ndarray, s: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(w > 0, s * s / np.where(w > 0, w, 1.0), 0.0)


@register("multi_otsu")
def _multi_otsu_ref(img: NdImage, classes: int = 3, bins: int = 256) -> list[float]:
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if classes == 2:
        return [_otsu_ref(img, bins)]
    if classes > bins:
        raise ValueError(f"{classes} classes need at least as many bins, got {bins}")
    edges, counts, sums = _bin_stats(img.data, bins)
    W = np.concatenate([[0.0], np.cumsum(counts)])
    S = np.concatenate([[0.0], np.cumsum(sums)])
    if np.count_nonzero(counts) < classes:
        raise DegenerateImage(f"{classes} classes need at least {classes} occupied bins")
    if classes == 3:
        # exhaustive over split pairs 0 < k1 < k2 < bins
        k = np.arange(bins + 1)
        k1, k2 = k[1:-1, None], k[None, 1:-1]
        score = (_class_term(W[k1], S[k1])
                 + _class_term(W[k2] - W[k1], S[k2] - S[k1])
                 + _class_term(W[bins] - W[k2], S[bins] - S[k2]))
        valid = (k1 < k2) & (W[k1] > 0) & (W[k2] - W[k1] > 0) & (W[bins] - W[k2] > 0)
        score = np.where(valid, score, -np.inf).ravel()
        flat = _pick(score)
        i, j = divmod(flat, bins - 1)
        return [float(edges[i + 1]), float(edges[j + 1])]
    return _multi_otsu_dp(edges, W, S, classes, bins)


def _multi_otsu_dp(edges, W, S, classes, bins) -> list[float]:
    # best[c][k]: best score placing the first c classes in bins [0, k)
    best = np.full((classes + 1, bins + 1), -np.inf)
    arg = np.zeros((classes + 1, bins + 1), dtype=np.int64)
    best[0, 0] = 0.0
    j = np.arange(bins + 1)
    for c in range(1, classes + 1):
        for k in range(c, bins + 1):
            prev = j[c - 1:k]
            wc = W[k] - W[prev]
            cand = np.where(wc > 0, best[c - 1, prev] + _class_term(wc, S[k] - S[prev]), -np.inf)
            pos = int(np.argmax(cand))
            best[c, k] = cand[pos]
            arg[c, k] = prev[pos]
    cuts = []
    k = bins
    for c in range(classes, 1, -1):
        k = int(arg[c, k])
        cuts.append(k)
    return [float(edges[k]) for k in reversed(cuts)]


# ---------------------------------------------------------------------------
# binary morphology

MORPH_OPS = ("erode", "dilate", "open", "close")


def binary_morphology(mask: NdImage, se: StructuringElement, op: str) -> NdImage:
    """Erode, dilate, open or close a bool mask.

    Voxels outside the volume count as background, so erosion shrinks at the
    borders.  Opening and closing are evaluated on the unbounded volume (the
    mask padded by the element's reach) and cropped, which keeps closing
    extensive and both idempotent.
    """
    if op not in MORPH_OPS:
        raise ValueError(f"unknown morphology op {op!r}; expected one of {MORPH_OPS}")
    return dispatch("binary_morphology", mask, se, op)


def _check_mask(mask: NdImage, se: StructuringElement) -> np.ndarray:
    if se.ndim != mask.ndim:
        raise ValueError(f"structuring element is {se.ndim}-D, mask is {mask.ndim}-D")
    return mask.data.astype(bool)


def _shifted(m: np.ndarray, off, fill: bool) -> np.ndarray:
    """``out[p] = m[p + off]`` with `fill` outside the volume."""
    out = np.full(m.shape, fill, dtype=bool)
    src, dst = [], []
    for o, n in zip(off, m.shape):
        o = int(o)
        if abs(o) >= n:
            return out
        src.append(slice(max(o, 0), n + min(o, 0)))
        dst.append(slice(max(-o, 0), n - max(o, 0)))
    out[tuple(dst)] = m[tuple(src)]
    return out


def erode_reference(m: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.ones(m.shape, dtype=bool)
    for off in offsets:
        out &= _shifted(m, off, False)
    return out


def dilate_reference(m: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.zeros(m.shape, dtype=bool)
    for off in offsets:
        out |= _shifted(m, -off, False)
    return out


def _compose(m: np.ndarray, se: StructuringElement, op: str, erode, dilate) -> np.ndarray:
    if op == "erode":
        return erode(m, se)
    if op == "dilate":
        return dilate(m, se)
    reach = se.reach
    padded = np.pad(m, [(r, r) for r in reach])
    if op == "open":
        res = dilate(erode(padded, se), se)
    else:
        res = erode(dilate(padded, se), se)
    return res[tuple(slice(r, r + n) for r, n in zip(reach, m.shape))]


@register("binary_morphology")
def _morph_ref(mask: NdImage, se: StructuringElement, op: str) -> NdImage:
    m = _check_mask(mask, se)
    res = _compose(m, se, op,
                   lambda a, s: erode_reference(a, s.offsets),
                   lambda a, s: dilate_reference(a, s.offsets))
    return mask.derive(res)


def _sq_dist_to(sites: np.ndarray, axes) -> np.ndarray:
    from .segmentation import squared_distance_accelerated

    return squared_distance_accelerated(sites, None, axes)


def _ball_axes(se: StructuringElement, ndim: int):
    if se.kind == "ball":
        return tuple(range(ndim))
    return tuple(range(ndim - 2, ndim))


def _erode_edt(m: np.ndarray, se: StructuringElement) -> np.ndarray:
    # p survives iff no background voxel (outside the volume included) lies
    # within the element; one background layer suffices for the outside
    padded = np.pad(~m, 1, constant_values=True)
    d2 = _sq_dist_to(padded, _ball_axes(se, m.ndim))
    return (d2 > se.radius * se.radius)[(slice(1, -1),) * m.ndim]


def _dilate_edt(m: np.ndarray, se: StructuringElement) -> np.ndarray:
    return _sq_dist_to(m, _ball_axes(se, m.ndim)) <= se.radius * se.radius


def _morph_acc(mask: NdImage, se: StructuringElement, op: str) -> NdImage:
    m = _check_mask(mask, se)
    if se.kind not in ("ball", "disk") or m.ndim > 3:
        return _morph_ref(mask, se, op)
    return mask.derive(_compose(m, se, op, _erode_edt, _dilate_edt))


# ---------------------------------------------------------------------------
# region cleanup


def fill_holes(mask: NdImage, max_hole_size: float = math.inf) -> NdImage:
    """Fill enclosed background components of at most `max_hole_size` voxels.

    Background components use face connectivity; components touching the
    volume border are never filled.
    """
    return dispatch("fill_holes", mask, max_hole_size)


@register("fill_holes", generic=True)
def _fill_holes(mask: NdImage, max_hole_size: float = math.inf) -> NdImage:
    from .segmentation import connected_components

    m = mask.data.astype(bool)
    bg = connected_components(mask.derive(~m), "face").data
    sizes = np.bincount(bg.ravel())
    border = np.zeros(len(sizes), dtype=bool)
    for ax in range(m.ndim):
        for end in (0, -1):
            border[np.take(bg, end, axis=ax).ravel()] = True
    fill = (sizes <= max_hole_size) & ~border
    fill[0] = False
    return mask.derive(m | fill[bg])


def remove_small_objects(labels: NdImage, min_size: int) -> NdImage:
    """Zero every label with fewer than `min_size` voxels; survivors keep ids."""
    return dispatch("remove_small_objects", labels, min_size)


@register("remove_small_objects")
def _remove_small_ref(labels: NdImage, min_size: int) -> NdImage:
    lab = labels.data.astype(np.int64)
    if lab.min(initial=0) < 0:
        raise ValueError("labels must be nonnegative")
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_size
    keep[0] = True
    out = np.where(keep[lab], lab, 0)
    return labels.derive(out.astype(labels.data.dtype))


if HAVE_COMPILED:
    register("binary_morphology", ACCELERATED)(_morph_acc)
