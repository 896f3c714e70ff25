"""Distance transform, seeds, seeded watershed, labelling and the two-stage
nuclei/cell pipeline."""

from __future__ import annotations

import contextlib
import heapq
import itertools
import math
import time

import numpy as np
import scipy.ndimage as ndi

from ._compiled import HAVE_COMPILED, as3d, axis_view, kernels, offsets3d
from .core import ACCELERATED, NdImage, dispatch, normalize_minmax, register, thread_count
from .errors import SeedOutsideMask, ShapeMismatch
from .filters import StructuringElement, median
from .morphthresh import binary_morphology, fill_holes, multi_otsu, otsu_threshold, remove_small_objects
from .transform import rescale

CONNECTIVITY = ("face", "full")


# ---------------------------------------------------------------------------
# Euclidean distance transform


def _weights(spacing, ndim: int) -> tuple[float, ...]:
    return tuple(float(s) ** 2 for s in spacing) if spacing is not None else (1.0,) * ndim


def squared_distance_reference(sites: np.ndarray, spacing=None, axes=None) -> np.ndarray:
    """Squared distance to the nearest `sites` voxel (separable min-plus, O(n^2) per line)."""
    g = np.where(sites, 0.0, np.inf)
    w = _weights(spacing, sites.ndim)
    for ax in range(sites.ndim) if axes is None else axes:
        n = g.shape[ax]
        cur = np.moveaxis(g, ax, 0)
        out = cur.copy()
        has_site = np.isfinite(cur).any(axis=0)
        for d in range(1, n):
            cost = w[ax] * d * d
            finite = np.isfinite(out)
            # stop once no finite value can improve and every line with a
            # site has been reached everywhere
            if finite.any() and cost > out[finite].max() and not np.any(~finite & has_site):
                break
            np.minimum(out[d:], cur[:-d] + cost, out=out[d:])
            np.minimum(out[:-d], cur[d:] + cost, out=out[:-d])
        g = np.moveaxis(out, 0, ax)
    return g


def squared_distance_accelerated(sites: np.ndarray, spacing=None, axes=None) -> np.ndarray:
    """Same as the reference, via the exact lower-envelope transform."""
    g = np.where(sites, 0.0, np.inf)
    w = _weights(spacing, sites.ndim)
    nt = thread_count()
    for ax in range(sites.ndim) if axes is None else axes:
        kernels.edt_pass(axis_view(g, ax), w[ax], nt)
    return g


def distance_transform(mask: NdImage) -> NdImage:
    """Euclidean distance from each foreground voxel to the nearest background voxel.

    Physical spacing is honoured when present.  The volume border is not
    background, so a mask with no background voxel maps to ``inf``.
    """
    return dispatch("distance_transform", mask)


@register("distance_transform")
def _edt_ref(mask: NdImage) -> NdImage:
    d2 = squared_distance_reference(~mask.data.astype(bool), mask.spacing)
    return mask.derive(np.sqrt(d2).astype(np.float32))


def _edt_acc(mask: NdImage) -> NdImage:
    d2 = squared_distance_accelerated(~mask.data.astype(bool), mask.spacing)
    return mask.derive(np.sqrt(d2).astype(np.float32))


# ---------------------------------------------------------------------------
# local maxima and seeds


def local_maxima(img: NdImage, se: StructuringElement) -> NdImage:
    """Bool mask of voxels > 0 that no in-bounds neighbour under `se` exceeds."""
    return dispatch("local_maxima", img, se)


@register("local_maxima")
def _maxima_ref(img: NdImage, se: StructuringElement) -> NdImage:
    x = img.data.astype(np.float64)
    reach = se.reach
    padded = np.pad(x, [(r, r) for r in reach], constant_values=-np.inf)
    ok = x > 0
    for off in se.offsets:
        nb = padded[tuple(slice(r + o, r + o + n) for r, o, n in zip(reach, off, x.shape))]
        ok &= ~(nb > x)
    return img.derive(ok)


def _maxima_acc(img: NdImage, se: StructuringElement) -> NdImage:
    if img.ndim > 3:
        return _maxima_ref(img, se)
    x = np.ascontiguousarray(img.data, dtype=np.float64 if img.elem == "u32" else np.float32)
    out = np.empty(x.shape, dtype=np.uint8)
    kernels.local_maxima(as3d(x), offsets3d(se.offsets), as3d(out), thread_count())
    return img.derive(out.view(bool))


def find_seeds(distance: NdImage, se: StructuringElement) -> NdImage:
    """Label connected groups of local maxima of `distance` (full connectivity).

    A voxel is a maximum when its value is positive and no in-bounds voxel
    of the footprint `se` is larger; ids follow raster order.
    """
    return dispatch("find_seeds", distance, se)


@register("find_seeds", generic=True)
def _find_seeds(distance: NdImage, se: StructuringElement) -> NdImage:
    return connected_components(local_maxima(distance, se), "full")


# ---------------------------------------------------------------------------
# connected components


def _structure(ndim: int, connectivity: str) -> np.ndarray:
    if connectivity not in CONNECTIVITY:
        raise ValueError(f"connectivity must be one of {CONNECTIVITY}, got {connectivity!r}")
    return ndi.generate_binary_structure(ndim, 1 if connectivity == "face" else ndim)


def connected_components(mask: NdImage, connectivity: str = "face") -> NdImage:
    """Label foreground components with ids 1..K in raster order of first voxel."""
    return dispatch("connected_components", mask, connectivity)


def relabel_by_first_occurrence(lab: np.ndarray) -> np.ndarray:
    flat = lab.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first)]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.uint32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.uint32)
    return lut[lab]


@register("connected_components")
def _cc_ref(mask: NdImage, connectivity: str = "face") -> NdImage:
    structure = _structure(mask.ndim, connectivity)
    lab, _ = ndi.label(mask.data.astype(bool), structure=structure)
    return mask.derive(relabel_by_first_occurrence(lab))


def backward_offsets(ndim: int, connectivity: str) -> np.ndarray:
    """Neighbour offsets that precede the origin in raster order."""
    structure = _structure(ndim, connectivity)
    offs = [o for o in itertools.product((-1, 0, 1), repeat=ndim)
            if structure[tuple(c + 1 for c in o)] and o < (0,) * ndim]
    return np.array(offs, dtype=np.int64)


def _cc_acc(mask: NdImage, connectivity: str = "face") -> NdImage:
    if mask.ndim > 3:
        return _cc_ref(mask, connectivity)
    m = np.ascontiguousarray(mask.data.astype(np.uint8))
    out = np.empty(m.shape, dtype=np.uint32)
    kernels.label_components(as3d(m), offsets3d(backward_offsets(mask.ndim, connectivity)), as3d(out))
    return mask.derive(out)


def relabel_sequential(labels: NdImage) -> NdImage:
    """Map the ids present to 1..K preserving their order."""
    lab = labels.data
    ids = np.unique(lab)
    ids = ids[ids != 0]
    lut = np.zeros(int(lab.max(initial=0)) + 1, dtype=np.uint32)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=np.uint32)
    return labels.derive(lut[lab])


# ---------------------------------------------------------------------------
# seeded watershed


def watershed(landscape: NdImage, seeds: NdImage, mask: NdImage | None = None) -> NdImage:
    """Priority flood from labelled seeds in ascending landscape order.

    Flooding uses face neighbours.  A voxel takes the label of the region
    that first pushes it; equal priorities pop first-in first-out, and seeds
    enter in ascending label id, then raster order.  Voxels outside `mask`,
    or not reachable from any seed inside it, stay 0.
    """
    return dispatch("watershed", landscape, seeds, mask)


def _watershed_inputs(landscape: NdImage, seeds: NdImage, mask: NdImage | None):
    if seeds.shape != landscape.shape or (mask is not None and mask.shape != landscape.shape):
        raise ShapeMismatch("watershed inputs must share one shape")
    lab = seeds.data.astype(np.uint32)
    m = np.ones(landscape.shape, dtype=bool) if mask is None else mask.data.astype(bool)
    if np.any((lab > 0) & ~m):
        raise SeedOutsideMask("seed voxels must lie inside the mask")
    flat = lab.ravel()
    idx = np.flatnonzero(flat)
    order = np.lexsort((idx, flat[idx]))
    return landscape.data.astype(np.float64), lab.copy(), m, idx[order]


@register("watershed")
def _watershed_ref(landscape: NdImage, seeds: NdImage, mask: NdImage | None = None) -> NdImage:
    land, lab, m, seed_idx = _watershed_inputs(landscape, seeds, mask)
    shape = land.shape
    strides = np.cumprod((1,) + shape[:0:-1])[::-1]
    land_f, lab_f, m_f = land.ravel(), lab.ravel(), m.ravel()
    heap: list[tuple[float, int, int]] = []
    age = 0
    for i in seed_idx.tolist():
        heap.append((land_f[i], age, i))
        age += 1
    heapq.heapify(heap)
    moves = [(ax, s, n, d) for ax, (s, n) in enumerate(zip(strides.tolist(), shape)) for d in (-1, 1)]
    while heap:
        _, _, i = heapq.heappop(heap)
        label = lab_f[i]
        for ax, s, n, d in moves:
            c = (i // s) % n + d
            if c < 0 or c >= n:
                continue
            j = i + d * s
            if lab_f[j] or not m_f[j]:
                continue
            lab_f[j] = label
            heapq.heappush(heap, (land_f[j], age, j))
            age += 1
    return landscape.derive(lab)


def _watershed_acc(landscape: NdImage, seeds: NdImage, mask: NdImage | None = None) -> NdImage:
    if landscape.ndim > 3:
        return _watershed_ref(landscape, seeds, mask)
    land, lab, m, seed_idx = _watershed_inputs(landscape, seeds, mask)
    kernels.watershed(as3d(np.ascontiguousarray(land)), np.ascontiguousarray(seed_idx, dtype=np.int64),
                      as3d(m.astype(np.uint8)), as3d(lab))
    return landscape.derive(lab)


# ---------------------------------------------------------------------------
# pipeline


class StageTimer:
    """Collects ``(stage, seconds)`` pairs with a monotonic clock."""

    def __init__(self):
        self.rows: list[tuple[str, float]] = []

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.rows.append((name, time.perf_counter() - t0))


@contextlib.contextmanager
def _no_timer(name: str):
    yield


def _stage(timer: StageTimer | None):
    return timer.stage if timer is not None else _no_timer


NUCLEI_STAGES = ("normalize", "downscale", "median", "threshold", "fill_holes",
                 "watershed", "upscale", "size_filter")
CELL_STAGES = ("monolayer", "seeds", "watershed", "size_filter")

NUCLEI_PARAMS = {
    "scale": 0.5, "median_radius": 5, "hole_area": 20, "seed_radius": 10, "min_size": 50,
    "landscape": "negative distance",
}
CELL_PARAMS = {
    "scale": 0.25, "membrane_classes": 3, "membrane_hole_area": math.inf, "closing_radius": 17,
    "seed_erosion_radius": 5, "min_size": 100, "landscape": "normalized membrane",
}


def segment_nuclei(dna: NdImage, timer: StageTimer | None = None) -> NdImage:
    """Nuclei labels at input resolution from a DNA volume."""
    stage = _stage(timer)
    p = NUCLEI_PARAMS
    with stage("normalize"):
        x = normalize_minmax(dna)
    with stage("downscale"):
        x = rescale(x, p["scale"], order=1, anti_aliasing=True)
    with stage("median"):
        x = median(x, StructuringElement.ball(p["median_radius"], x.ndim))
    with stage("threshold"):
        if float(x.data.max()) > float(x.data.min()):
            t = otsu_threshold(x)
            fg = x.derive(x.data >= t)
        else:
            fg = x.derive(np.zeros(x.shape, dtype=bool))
    with stage("fill_holes"):
        fg = fill_holes(fg, p["hole_area"])
    with stage("watershed"):
        dist = distance_transform(fg)
        seeds = find_seeds(dist, StructuringElement.ball(p["seed_radius"], x.ndim))
        neg = dist.derive(-dist.data)
        lab = watershed(neg, seeds, fg)
    with stage("upscale"):
        lab = rescale(lab, 1.0 / p["scale"], order=0, output_shape=dna.shape)
    with stage("size_filter"):
        lab = relabel_sequential(remove_small_objects(lab, p["min_size"]))
    return lab.with_spacing(dna.spacing)


def erode_labels(labels: NdImage, se: StructuringElement) -> NdImage:
    """Erode every label separately; other labels and the border count as background."""
    return dispatch("erode_labels", labels, se)


@register("erode_labels", generic=True)
def _erode_labels(labels: NdImage, se: StructuringElement) -> NdImage:
    lab = labels.data
    out = np.zeros_like(lab)
    for i, box in enumerate(ndi.find_objects(lab), start=1):
        if box is None:
            continue
        part = labels.derive(lab[box] == i, spacing=None)
        kept = binary_morphology(part, se, "erode").data
        out[box][kept] = i
    return labels.derive(out)


def monolayer_mask(membrane: NdImage, mito: NdImage, dna: NdImage, timer: StageTimer | None = None) -> NdImage:
    """Union of per-channel foreground masks at reduced scale, closed and upscaled."""
    p = CELL_PARAMS
    small = [rescale(normalize_minmax(c), p["scale"], order=1, anti_aliasing=True) for c in (membrane, mito, dna)]
    mem, mit, dn = small
    parts = []
    t1 = multi_otsu(mem, p["membrane_classes"])[0]
    parts.append(fill_holes(mem.derive(mem.data >= t1), p["membrane_hole_area"]).data)
    for ch in (mit, dn):
        parts.append(ch.data >= otsu_threshold(ch))
    union = mem.derive(np.logical_or.reduce(parts))
    closed = binary_morphology(union, StructuringElement.disk(p["closing_radius"], union.ndim), "close")
    return rescale(closed, 1.0 / p["scale"], order=0, output_shape=membrane.shape)


def segment_cells(membrane: NdImage, mito: NdImage, dna: NdImage, nuclei: NdImage,
                  timer: StageTimer | None = None) -> NdImage:
    """Cell labels grown from eroded nuclei through the membrane landscape."""
    shapes = {membrane.shape, mito.shape, dna.shape, nuclei.shape}
    if len(shapes) != 1:
        raise ShapeMismatch(f"channels and nuclei must share one shape, got {sorted(shapes)}")
    stage = _stage(timer)
    p = CELL_PARAMS
    with stage("monolayer"):
        mono = monolayer_mask(membrane, mito, dna)
    with stage("seeds"):
        seeds = erode_labels(nuclei, StructuringElement.ball(p["seed_erosion_radius"], nuclei.ndim))
        seeds = seeds.derive(np.where(mono.data, seeds.data, 0).astype(np.uint32))
    with stage("watershed"):
        land = normalize_minmax(membrane)
        cells = watershed(land, seeds, mono)
    with stage("size_filter"):
        cells = relabel_sequential(remove_small_objects(cells, p["min_size"]))
    return cells.with_spacing(membrane.spacing)


if HAVE_COMPILED:
    register("distance_transform", ACCELERATED)(_edt_acc)
    register("local_maxima", ACCELERATED)(_maxima_acc)
    register("connected_components", ACCELERATED)(_cc_acc)
    register("watershed", ACCELERATED)(_watershed_acc)
