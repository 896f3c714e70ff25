"""Backend-tagged images, the operation registry and elementwise primitives.

Every image carries a :class:`BackendId`.  Public operations route through
:func:`dispatch`, which picks the implementation registered for the image's
backend and falls back to the reference implementation (with a one-time
warning) when the accelerated backend has no kernel for that operation.
"""

from __future__ import annotations

import enum
import os
import threading
import warnings
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from .errors import (
    BackendUnavailable,
    MixedBackends,
    RegistryFrozen,
    ShapeMismatch,
    UnknownOperation,
)

DIV_EPSILON = 1e-12


class BackendId(str, enum.Enum):
    REFERENCE = "reference"
    ACCELERATED = "accelerated"

    @classmethod
    def parse(cls, value: "BackendId | str") -> "BackendId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown backend {value!r}; expected 'reference' or 'accelerated'") from None


REFERENCE = BackendId.REFERENCE
ACCELERATED = BackendId.ACCELERATED

# element kind -> numpy dtype
ELEM_DTYPES: dict[str, np.dtype] = {
    "f32": np.dtype(np.float32),
    "u16": np.dtype(np.uint16),
    "u32": np.dtype(np.uint32),
    "bool": np.dtype(np.bool_),
}


def elem_of(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype == np.bool_:
        return "bool"
    if dtype == np.uint16:
        return "u16"
    if np.issubdtype(dtype, np.integer):
        return "u32"
    if np.issubdtype(dtype, np.floating):
        return "f32"
    raise TypeError(f"unsupported dtype {dtype}")


class FallbackWarning(UserWarning):
    """Emitted once per operation when the reference kernel stands in."""


class NdImage:
    """Immutable N-D image with a backend tag and optional voxel spacing.

    Arrays are stored C-contiguous and read-only.  The element kind is one of
    ``f32``, ``u16``, ``u32`` (labels) or ``bool``; other numpy dtypes are
    converted on construction (floats to f32, integers to u32).
    """

    __slots__ = ("_data", "_backend", "_spacing")

    def __init__(self, data, backend: BackendId | str = REFERENCE, spacing: Sequence[float] | None = None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            raise ValueError("NdImage needs at least one axis")
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"all extents must be positive, got {arr.shape}")
        dtype = ELEM_DTYPES[elem_of(arr.dtype)]
        arr = np.array(arr, dtype=dtype, order="C", copy=True)
        arr.setflags(write=False)
        self._data = arr
        self._backend = BackendId.parse(backend)
        self._spacing = _check_spacing(spacing, arr.ndim)

    @classmethod
    def _wrap(cls, arr: np.ndarray, backend: BackendId, spacing: tuple[float, ...] | None) -> "NdImage":
        # internal constructor: takes ownership of `arr` without copying when possible
        obj = cls.__new__(cls)
        dtype = ELEM_DTYPES[elem_of(arr.dtype)]
        if arr.dtype != dtype or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.flags.writeable:
            arr.setflags(write=False)
        obj._data = arr
        obj._backend = backend
        obj._spacing = spacing
        return obj

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def backend(self) -> BackendId:
        return self._backend

    @property
    def spacing(self) -> tuple[float, ...] | None:
        return self._spacing

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def elem(self) -> str:
        return elem_of(self._data.dtype)

    def derive(self, arr: np.ndarray, spacing: Any = "same") -> "NdImage":
        """Wrap `arr` as a new image on this image's backend."""
        if isinstance(spacing, str) and spacing == "same":
            spacing = self._spacing if np.ndim(arr) == self.ndim else None
        else:
            spacing = _check_spacing(spacing, np.ndim(arr))
        return NdImage._wrap(np.asarray(arr), self._backend, spacing)

    def with_spacing(self, spacing: Sequence[float] | None) -> "NdImage":
        return NdImage._wrap(self._data, self._backend, _check_spacing(spacing, self.ndim))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __repr__(self) -> str:
        return (f"NdImage(shape={self.shape}, elem={self.elem}, "
                f"backend={self._backend.value}, spacing={self._spacing})")


# Label images are plain NdImages with elem u32.
LabelImage = NdImage


def _check_spacing(spacing, ndim: int) -> tuple[float, ...] | None:
    if spacing is None:
        return None
    sp = tuple(float(s) for s in spacing)
    if len(sp) != ndim:
        raise ValueError(f"spacing has {len(sp)} entries for a {ndim}-D image")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing entries must be finite and positive, got {sp}")
    return sp


def as_image(x, backend: BackendId | str = REFERENCE) -> NdImage:
    return x if isinstance(x, NdImage) else NdImage(x, backend=backend)


def to_backend(img: NdImage, target: BackendId | str) -> NdImage:
    """Re-tag `img` for `target`; values, shape and spacing are untouched."""
    target = BackendId.parse(target)
    if img.backend is target:
        return img
    return NdImage._wrap(img.data, target, img.spacing)


def thread_count() -> int:
    """Threads available to accelerated kernels (capped by ``VOXELKIT_THREADS``)."""
    try:
        cores = len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        cores = os.cpu_count() or 1
    cap = os.environ.get("VOXELKIT_THREADS")
    if cap:
        try:
            return max(1, min(int(cap), cores))
        except ValueError:
            pass
    return max(1, cores)


# ---------------------------------------------------------------------------
# registry and dispatch


class ExecutionRegistry:
    """Maps ``(operation, backend)`` to an implementation."""

    def __init__(self, fallback: bool = True):
        self.fallback = fallback
        self._table: dict[tuple[str, BackendId], Callable] = {}
        self._frozen = False
        self._warned: set[str] = set()
        self._lock = threading.Lock()

    def register(self, name: str, backend: BackendId | str | None = REFERENCE, *, generic: bool = False):
        """Decorator registering an implementation.

        ``generic=True`` registers a backend-agnostic implementation (one
        written purely in terms of other dispatched operations) for every
        backend.
        """
        backends = list(BackendId) if generic else [BackendId.parse(backend)]

        def deco(fn: Callable) -> Callable:
            if self._frozen:
                raise RegistryFrozen(f"cannot register {name!r}: registry is frozen")
            for b in backends:
                self._table[(name, b)] = fn
            return fn

        return deco

    def freeze(self) -> None:
        missing = [op for op in self.operations() if (op, REFERENCE) not in self._table]
        if missing:
            raise RuntimeError(f"operations without a reference implementation: {missing}")
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def operations(self) -> list[str]:
        return sorted({name for name, _ in self._table})

    def has(self, name: str, backend: BackendId | str) -> bool:
        return (name, BackendId.parse(backend)) in self._table

    def lookup(self, name: str, backend: BackendId) -> tuple[Callable, bool]:
        """Return ``(implementation, fell_back)``."""
        impl = self._table.get((name, backend))
        if impl is not None:
            return impl, False
        if not any(key[0] == name for key in self._table):
            raise UnknownOperation(name)
        if not self.fallback:
            raise BackendUnavailable(f"{name!r} has no {backend.value} implementation and fallback is off")
        impl = self._table.get((name, REFERENCE))
        if impl is None:
            raise BackendUnavailable(f"{name!r} has no reference implementation")
        with self._lock:
            first = name not in self._warned
            self._warned.add(name)
        if first:
            warnings.warn(
                f"{name}: no {backend.value} kernel available, running the reference implementation",
                FallbackWarning,
                stacklevel=4,
            )
        return impl, True

    def dispatch(self, name: str, *args, **kwargs):
        backend = _common_backend(name, args, kwargs)
        impl, _ = self.lookup(name, backend)
        return _retag(impl(*args, **kwargs), backend)


def _common_backend(name: str, args, kwargs) -> BackendId:
    found = [a.backend for a in list(args) + list(kwargs.values()) if isinstance(a, NdImage)]
    if not found:
        return REFERENCE
    first = found[0]
    if any(b is not first for b in found[1:]):
        raise MixedBackends(f"{name}: image arguments live on different backends {sorted({b.value for b in found})}")
    return first


def _retag(result, backend: BackendId):
    if isinstance(result, NdImage):
        return to_backend(result, backend)
    if isinstance(result, tuple) and not hasattr(result, "_fields"):
        return tuple(_retag(r, backend) for r in result)
    return result


REGISTRY = ExecutionRegistry()
register = REGISTRY.register


def dispatch(op_name: str, *args, **kwargs):
    """Run `op_name` on the backend of its image arguments."""
    return REGISTRY.dispatch(op_name, *args, **kwargs)


# ---------------------------------------------------------------------------
# primitives


def normalize_minmax(img: NdImage) -> NdImage:
    return dispatch("normalize_minmax", img)


@register("normalize_minmax")
def _normalize_minmax_ref(img: NdImage) -> NdImage:
    x = img.data.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return img.derive(np.zeros(img.shape, np.float32))
    return img.derive(((x - lo) / (hi - lo)).astype(np.float32))


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
    "min": np.minimum,
}


def elementwise(op: str, a: NdImage, b) -> NdImage:
    """Pointwise ``op`` of `a` and `b` (image or scalar); output is f32."""
    return dispatch("elementwise", op, a, b)


def safe_divide(num, den, eps: float = DIV_EPSILON):
    den = np.where(np.abs(den) < eps, eps, den)
    return num / den


@register("elementwise")
def _elementwise_ref(op: str, a: NdImage, b) -> NdImage:
    x = a.data.astype(np.float64)
    if isinstance(b, NdImage):
        if b.shape != a.shape:
            raise ShapeMismatch(f"elementwise {op}: {a.shape} vs {b.shape}")
        y = b.data.astype(np.float64)
    else:
        y = float(b)
    if op == "div":
        out = safe_divide(x, y)
    elif op in _ELEMENTWISE:
        out = _ELEMENTWISE[op](x, y)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return a.derive(np.asarray(out, dtype=np.float32))
