"""NDIV volume files, PGM slice export, synthetic phantoms and Gaussian PSFs.

NDIV layout::

    b"NDIV" | u32 LE header length | UTF-8 JSON header | raw LE payload

The header holds ``elem`` (f32, u16, u32 or bool), ``shape``, ``axes`` (one
letter per axis) and ``spacing`` (list or null).  The payload is the
row-major buffer; bool is one byte per voxel.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ELEM_DTYPES, NdImage
from .errors import BadMagic, EvenExtent, HeaderMismatch, PlacementFailure, TruncatedPayload

MAGIC = b"NDIV"
DEFAULT_AXES = {1: "X", 2: "YX", 3: "ZYX", 4: "CZYX"}
_FILE_DTYPES = {
    "f32": np.dtype("<f4"),
    "u16": np.dtype("<u2"),
    "u32": np.dtype("<u4"),
    "bool": np.dtype("u1"),
}


# ---------------------------------------------------------------------------
# NDIV


def write_volume(path: str | os.PathLike, img: NdImage, axes: str | None = None) -> None:
    """Write `img` as an NDIV file."""
    axes = axes or DEFAULT_AXES.get(img.ndim, "".join(chr(ord("A") + i) for i in range(img.ndim)))
    if len(axes) != img.ndim:
        raise HeaderMismatch(f"axes {axes!r} do not match a {img.ndim}-D image")
    header = {
        "elem": img.elem,
        "shape": list(img.shape),
        "axes": axes,
        "spacing": list(img.spacing) if img.spacing is not None else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = img.data.astype(_FILE_DTYPES[img.elem], copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_header(raw: bytes) -> tuple[dict, int]:
    """Parse and validate the header; returns ``(header, payload_offset)``."""
    if raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < 8:
        raise HeaderMismatch("file ends inside the header length field")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise HeaderMismatch("file ends inside the header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or {"elem", "shape", "axes"} - header.keys():
        raise HeaderMismatch("header needs elem, shape and axes")
    if header["elem"] not in _FILE_DTYPES:
        raise HeaderMismatch(f"unknown element kind {header['elem']!r}")
    shape = header["shape"]
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in shape)):
        raise HeaderMismatch(f"bad shape {shape!r}")
    if not isinstance(header["axes"], str) or len(header["axes"]) != len(shape):
        raise HeaderMismatch(f"axes {header['axes']!r} do not match shape {shape}")
    spacing = header.get("spacing")
    if spacing is not None and (not isinstance(spacing, list) or len(spacing) != len(shape)):
        raise HeaderMismatch(f"spacing {spacing!r} does not match shape {shape}")
    return header, 8 + hlen


def read_volume(path: str | os.PathLike) -> NdImage:
    """Read an NDIV file written by :func:`write_volume`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header, offset = read_header(raw)
    dtype = _FILE_DTYPES[header["elem"]]
    expected = math.prod(header["shape"]) * dtype.itemsize
    got = len(raw) - offset
    if got != expected:
        raise TruncatedPayload(f"payload has {got} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(header["shape"])
    arr = arr.astype(ELEM_DTYPES[header["elem"]])
    try:
        return NdImage(arr, spacing=header.get("spacing"))
    except ValueError as exc:
        raise HeaderMismatch(str(exc)) from None


def export_slice(img: NdImage, axis: int, index: int, path: str | os.PathLike) -> None:
    """Write one plane of `img` as an 8-bit binary PGM, min-max scaled."""
    if img.ndim < 2:
        raise ValueError("export_slice needs at least a 2-D image")
    plane = np.take(img.data, index, axis=axis).astype(np.float64)
    while plane.ndim > 2:
        plane = plane[0]
    lo, hi = plane.min(), plane.max()
    scaled = np.zeros(plane.shape) if hi == lo else (plane - lo) / (hi - lo)
    pixels = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM written by :func:`export_slice`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise BadMagic("not a binary PGM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise HeaderMismatch("only 8-bit PGM is supported")
    data = parts[4]
    if len(data) != width * height:
        raise TruncatedPayload(f"PGM payload has {len(data)} bytes, expected {width * height}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


# ---------------------------------------------------------------------------
# synthetic blobs


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a blob phantom.

    `anisotropy` stretches physical z: an object of radius r spans
    ``r / anisotropy`` voxels along z.  `gap` is the minimum clearance
    between object surfaces in isotropic units.
    """

    shape: tuple[int, ...] = (32, 128, 128)
    n_objects: int = 20
    radius_range: tuple[float, float] = (6.0, 10.0)
    seed: int = 0
    noise_sigma: float = 0.05
    anisotropy: float = 1.0
    gap: float = 2.0
    intensity_range: tuple[float, float] = (0.7, 1.0)
    max_tries: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        if len(self.shape) not in (2, 3) or any(n < 1 for n in self.shape):
            raise ValueError(f"shape must be 2-D or 3-D with positive extents, got {self.shape}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"radius range must satisfy 0 < min <= max, got {self.radius_range}")
        if self.n_objects < 0 or self.noise_sigma < 0 or self.anisotropy <= 0 or self.gap < 0:
            raise ValueError("n_objects, noise_sigma and gap must be >= 0 and anisotropy > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


class Blob(NamedTuple):
    center: tuple[float, ...]
    radius: float
    intensity: float


TAPER = 2.0


def _scale(spec: SynthSpec) -> np.ndarray:
    s = np.ones(len(spec.shape))
    if len(spec.shape) == 3:
        s[0] = spec.anisotropy
    return s


def place_blobs(spec: SynthSpec, rng: np.random.Generator) -> list[Blob]:
    """Random non-overlapping blob placement fully inside the volume."""
    scale = _scale(spec)
    blobs: list[Blob] = []
    for _ in range(spec.n_objects):
        for _ in range(spec.max_tries):
            r = float(rng.uniform(*spec.radius_range))
            half = r / scale  # semi-axes in voxels
            lo, hi = half, np.array(spec.shape) - 1 - half
            if np.any(hi < lo):
                continue
            c = rng.uniform(lo, hi)
            ok = all(
                np.linalg.norm((c - np.array(b.center)) * scale) >= r + b.radius + spec.gap for b in blobs
            )
            if ok:
                blobs.append(Blob(tuple(float(v) for v in c), r, float(rng.uniform(*spec.intensity_range))))
                break
        else:
            raise PlacementFailure(
                f"could not place object {len(blobs) + 1} of {spec.n_objects} after {spec.max_tries} tries"
            )
    return blobs


def _blob_box(b: Blob, shape, scale):
    half = b.radius / scale
    lo = [max(0, int(math.floor(c - h))) for c, h in zip(b.center, half)]
    hi = [min(n, int(math.ceil(c + h)) + 1) for c, h, n in zip(b.center, half, shape)]
    box = tuple(slice(a, z) for a, z in zip(lo, hi))
    grids = np.meshgrid(*[np.arange(s.start, s.stop) for s in box], indexing="ij")
    dist = np.sqrt(sum(((g - c) * k) ** 2 for g, c, k in zip(grids, b.center, scale)))
    return box, dist


def taper_profile(dist: np.ndarray, radius: float) -> np.ndarray:
    """1 inside ``radius - 2``, raised-cosine down to 0 at ``radius``."""
    t = np.clip((dist - (radius - TAPER)) / TAPER, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def render_blobs(blobs: list[Blob], shape, scale) -> tuple[np.ndarray, np.ndarray]:
    img = np.zeros(shape, dtype=np.float64)
    lab = np.zeros(shape, dtype=np.uint32)
    for i, b in enumerate(blobs, start=1):
        box, dist = _blob_box(b, shape, scale)
        img[box] = np.maximum(img[box], b.intensity * taper_profile(dist, b.radius))
        lab[box][dist <= b.radius - TAPER / 2] = i
    return img, lab


def generate_blobs(spec: SynthSpec) -> tuple[NdImage, NdImage]:
    """Soft-edged ellipsoids plus Gaussian noise, and their instance labels.

    Labels are 1..n in placement order and cover voxels within
    ``radius - 1`` (the middle of the cosine taper).
    """
    rng = np.random.default_rng(spec.seed)
    blobs = place_blobs(spec, rng)
    img, lab = render_blobs(blobs, spec.shape, _scale(spec))
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    return NdImage(img.astype(np.float32)), NdImage(lab)


# ---------------------------------------------------------------------------
# three-channel cell phantom


class CellPhantom(NamedTuple):
    membrane: NdImage
    mito: NdImage
    dna: NdImage
    nuclei: NdImage
    cells: NdImage


PHANTOM_SPEC = SynthSpec(shape=(56, 288, 288), n_objects=20, radius_range=(16.0, 22.0),
                         seed=0, noise_sigma=0.05, gap=6.0)


def generate_cell_phantom(spec: SynthSpec = PHANTOM_SPEC, margin: int = 2, headroom: int = 12,
                          mito_density: float = 0.004, membrane_blur: float = 1.0) -> CellPhantom:
    """Monolayer phantom: nuclei blobs, Voronoi cells around them, outlined
    membranes and speckled mitochondria.

    The cell layer fills ``spec.shape`` minus a `margin`-voxel shell; an
    empty band of `headroom` planes is added above it along z.  Every cell
    is the set of layer voxels nearest to one nucleus centre, so it contains
    that nucleus.
    """
    import scipy.ndimage as ndi

    if len(spec.shape) != 3:
        raise ValueError("the cell phantom is 3-D")
    rng = np.random.default_rng(spec.seed)
    blobs = place_blobs(spec, rng)
    scale = _scale(spec)
    shape = (spec.shape[0] + headroom,) + spec.shape[1:]
    dna, nuclei = render_blobs(blobs, shape, scale)

    region = np.zeros(shape, dtype=bool)
    region[margin:spec.shape[0] - margin, margin:-margin, margin:-margin] = True
    cells = np.zeros(shape, dtype=np.uint32)
    if blobs:
        centers = np.array([b.center for b in blobs]) * scale
        grid = np.indices(shape).reshape(3, -1).T * scale
        best = np.full(len(grid), np.inf)
        owner = np.zeros(len(grid), dtype=np.uint32)
        for i, c in enumerate(centers, start=1):
            d = ((grid - c) ** 2).sum(axis=1)
            closer = d < best
            best[closer] = d[closer]
            owner[closer] = i
        cells = np.where(region, owner.reshape(shape), 0).astype(np.uint32)

    boundary = np.zeros(shape, dtype=bool)
    for ax in range(3):
        a = np.swapaxes(cells, 0, ax)
        edge = np.zeros(a.shape, dtype=bool)
        edge[1:] |= a[1:] != a[:-1]
        edge[:-1] |= a[1:] != a[:-1]
        boundary |= np.swapaxes(edge, 0, ax)
    boundary &= region
    membrane = ndi.gaussian_filter(boundary.astype(np.float64), membrane_blur, mode="reflect")
    membrane /= max(membrane.max(), 1e-12)

    inside = region & ~boundary & (nuclei == 0)
    speckle = (rng.random(shape) < mito_density) & inside
    mito = ndi.gaussian_filter(speckle.astype(np.float64), 1.0, mode="reflect")
    mito /= max(mito.max(), 1e-12)

    def noisy(x):
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, size=shape)
        return NdImage(x.astype(np.float32))

    return CellPhantom(noisy(membrane), noisy(mito), noisy(dna), NdImage(nuclei), NdImage(cells))


# ---------------------------------------------------------------------------
# PSF


def gaussian_psf(shape, sigmas) -> NdImage:
    """Centred separable Gaussian normalized to unit sum; extents must be odd."""
    shape = tuple(int(n) for n in shape)
    if any(n % 2 == 0 or n < 1 for n in shape):
        raise EvenExtent(f"PSF extents must be odd, got {shape}")
    if np.ndim(sigmas) == 0:
        sigmas = (float(sigmas),) * len(shape)
    if len(sigmas) != len(shape) or any(s <= 0 for s in sigmas):
        raise ValueError(f"need one positive sigma per axis, got {sigmas}")
    psf = np.ones((1,) * len(shape))
    for ax, (n, s) in enumerate(zip(shape, sigmas)):
        x = np.arange(n) - n // 2
        g = np.exp(-0.5 * (x / s) ** 2)
        g /= g.sum()
        psf = psf * g.reshape([-1 if k == ax else 1 for k in range(len(shape))])
    psf /= psf.sum()
    return NdImage(psf.astype(np.float32))


# ---------------------------------------------------------------------------
# deconvolution phantom


class DeconvPhantom(NamedTuple):
    observed: NdImage
    truth: NdImage
    blurred: NdImage
    psf: NdImage


DECONV_SPEC = SynthSpec(shape=(32, 96, 96), n_objects=12, radius_range=(3.0, 7.0), seed=1,
                        noise_sigma=0.0, gap=2.0)


def generate_deconv_phantom(spec: SynthSpec = DECONV_SPEC, sigmas=(1.0, 2.0, 2.0),
                            psf_shape=(9, 17, 17), peak: float = 1000.0, background: float = 0.05,
                            noise_seed: int = 0) -> DeconvPhantom:
    """Photon-count blob phantom blurred by a Gaussian PSF with Poisson noise.

    `truth` is in photons: blobs scaled to `peak` over a flat floor of
    ``background * peak``.
    """
    from .filters import fft_convolve

    clean, _ = generate_blobs(spec)
    truth = clean.data.astype(np.float64) * peak + background * peak
    psf = gaussian_psf(psf_shape, sigmas)
    blurred = fft_convolve(NdImage(truth.astype(np.float32)), psf)
    rng = np.random.default_rng(noise_seed)
    observed = rng.poisson(np.maximum(blurred.data.astype(np.float64), 0.0)).astype(np.float32)
    return DeconvPhantom(NdImage(observed), NdImage(truth.astype(np.float32)), blurred, psf)
