"""Dense float tensors.

Tensors are plain contiguous ``numpy.ndarray`` objects. Model data is
float32; the gradient-check harness runs the same ops in float64, so every
op here preserves the floating dtype of its inputs instead of forcing one.

Axis convention everywhere in the package: (N, C, T, X, Y, Z).
"""

from __future__ import annotations

import sys
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AxisError, ShapeError, SizeError

DTYPE = np.float32
MAX_NDIM = 6

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_NDIM:
        raise ShapeError(f"shape must have 1..{MAX_NDIM} dims, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > sys.maxsize:
            raise SizeError(f"element count of {dims} overflows the platform word")
    return dims


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=dtype)


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


def elementwise(op: str, a: np.ndarray, b=None, fn: Callable | None = None) -> np.ndarray:
    """Apply ``add``/``sub``/``mul`` (tensor or scalar ``b``), ``scale`` (scalar ``b``)
    or ``map`` (unary ``fn``) elementwise."""
    a = np.asarray(a)
    if op == "map":
        if fn is None:
            raise ValueError("map needs fn")
        return np.ascontiguousarray(fn(a), dtype=a.dtype)
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale takes a scalar")
        return np.ascontiguousarray(a * a.dtype.type(b))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        b = a.dtype.type(b)
    else:
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.ascontiguousarray(_BINARY[op](a, b))


def _norm_axes(ndim: int, axes: Iterable[int] | None) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, a: np.ndarray, axes: Iterable[int] | None = None) -> np.ndarray:
    """Reduce over ``axes`` (all axes when None); reduced axes are removed."""
    a = np.asarray(a)
    axes = _norm_axes(a.ndim, axes)
    if op == "sum":
        out = a.sum(axis=axes)
    elif op == "mean":
        count = 1
        for ax in axes:
            count *= a.shape[ax]
        out = a.sum(axis=axes) / a.dtype.type(count)
    elif op == "max":
        out = a.max(axis=axes)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return np.array(out, dtype=a.dtype)


def reshape(a: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    a = np.asarray(a)
    dims = tuple(int(d) for d in shape)
    if int(np.prod(dims, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {dims}")
    return np.ascontiguousarray(a).reshape(dims)


def permute(a: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    a = np.asarray(a)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise AxisError(f"{perm} is not a permutation of {a.ndim} axes")
    return np.ascontiguousarray(a.transpose(perm))


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)
