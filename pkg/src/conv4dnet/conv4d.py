"""4D temporal-spatial convolution and pooling.

Inputs are laid out (N, C, T, X, Y, Z). "Convolution" means
cross-correlation (no kernel flip) with zero padding:

    out[n, co, t, x, y, z] = bias[co] + sum_{ci, dt, dx, dy, dz}
        w[co, ci, dt, dx, dy, dz] * in_pad[n, ci, t*sT + dt, x*sX + dx, y*sY + dy, z*sZ + dz]

Three forward routes compute the same function:

* ``conv4d_reference``: nested loops over output positions, the test oracle.
* ``conv4d_forward``: one GEMM over gathered 4D patches (im2col).
* ``conv4d_decomposed``: one 3D GEMM convolution per temporal kernel offset,
  accumulated over shifted time slabs.

3D convolution is the kT = 1 case; ``conv3d_forward`` and ``conv3d_backward``
wrap 5D (N, C, X, Y, Z) inputs accordingly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GeometryError, ShapeError

SPATIOTEMPORAL_AXES = (2, 3, 4, 5)


def _quad(value, name, minimum):
    if np.isscalar(value):
        value = (value,) * 4
    value = tuple(int(v) for v in value)
    if len(value) != 4:
        raise GeometryError(f"{name} needs 4 entries (T, X, Y, Z), got {value}")
    if any(v < minimum for v in value):
        raise GeometryError(f"{name} entries must be >= {minimum}, got {value}")
    return value


@dataclass(frozen=True)
class Conv4dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3, 3)
    stride: tuple = (1, 1, 1, 1)
    padding: tuple = (0, 0, 0, 0)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise GeometryError("channel counts must be positive")
        object.__setattr__(self, "kernel", _quad(self.kernel, "kernel", 1))
        object.__setattr__(self, "stride", _quad(self.stride, "stride", 1))
        object.__setattr__(self, "padding", _quad(self.padding, "padding", 0))

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, extents):
        """Output (T', X', Y', Z') for input extents (T, X, Y, Z)."""
        out = []
        for axis, n, k, s, p in zip("TXYZ", extents, self.kernel, self.stride, self.padding):
            span = n + 2 * p - k
            if span < 0:
                raise GeometryError(
                    f"axis {axis}: extent {n} with padding {p} is smaller than kernel {k}"
                )
            out.append(span // s + 1)
        return tuple(out)

    def is_pointwise(self):
        return self.kernel == (1, 1, 1, 1) and self.stride == (1, 1, 1, 1) and self.padding == (0, 0, 0, 0)


@dataclass
class Conv4dParams:
    weight: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0], dtype=self.weight.dtype)


def _check(spec: Conv4dSpec, params: Conv4dParams, x: np.ndarray):
    if x.ndim != 6:
        raise ShapeError(f"expected (N, C, T, X, Y, Z) input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {spec.in_channels}")
    if params.weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {params.weight.shape} != {spec.weight_shape}")
    if params.bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {params.bias.shape} != ({spec.out_channels},)")
    return spec.output_extents(x.shape[2:])


def _pad(x, padding):
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _windows(xp, kernel, stride, out_extents):
    """Strided view (N, C, T', X', Y', Z', kT, kX, kY, kZ) over a padded input."""
    view = sliding_window_view(xp, kernel, axis=SPATIOTEMPORAL_AXES)
    index = (slice(None), slice(None)) + tuple(
        slice(0, (o - 1) * s + 1, s) for o, s in zip(out_extents, stride)
    )
    return view[index]


def _dtype(x, params):
    return np.result_type(x.dtype, params.weight.dtype)


def conv4d_forward(spec: Conv4dSpec, params: Conv4dParams, x: np.ndarray) -> np.ndarray:
    out_ext = _check(spec, params, x)
    dtype = _dtype(x, params)
    if spec.is_pointwise():
        w = params.weight.reshape(spec.out_channels, spec.in_channels)
        out = np.tensordot(w, x, axes=([1], [1])).transpose(1, 0, 2, 3, 4, 5)
    else:
        cols = _windows(_pad(x, spec.padding), spec.kernel, spec.stride, out_ext)
        out = np.tensordot(cols, params.weight, axes=([1, 6, 7, 8, 9], [1, 2, 3, 4, 5]))
        out = out.transpose(0, 5, 1, 2, 3, 4)
    out = out + params.bias.reshape(1, -1, 1, 1, 1, 1)
    return np.ascontiguousarray(out, dtype=dtype)


def conv4d_reference(spec: Conv4dSpec, params: Conv4dParams, x: np.ndarray) -> np.ndarray:
    """Direct definition: one dot product per output element."""
    out_ext = _check(spec, params, x)
    xp = _pad(x, spec.padding)
    w, b = params.weight, params.bias
    kT, kX, kY, kZ = spec.kernel
    sT, sX, sY, sZ = spec.stride
    n_batch = x.shape[0]
    out = np.empty((n_batch, spec.out_channels) + out_ext, dtype=_dtype(x, params))
    for n in range(n_batch):
        for co in range(spec.out_channels):
            for t, i, j, k in itertools.product(*(range(o) for o in out_ext)):
                patch = xp[n, :, t * sT:t * sT + kT, i * sX:i * sX + kX,
                           j * sY:j * sY + kY, k * sZ:k * sZ + kZ]
                out[n, co, t, i, j, k] = b[co] + np.sum(w[co] * patch)
    return out


def _conv3d_gemm(xp5, w3, stride3, out3):
    """3D correlation of pre-padded (B, Cin, X, Y, Z) with (Cout, Cin, kX, kY, kZ).

    Returns (B, X', Y', Z', Cout) without bias.
    """
    view = sliding_window_view(xp5, w3.shape[2:], axis=(2, 3, 4))
    index = (slice(None), slice(None)) + tuple(
        slice(0, (o - 1) * s + 1, s) for o, s in zip(out3, stride3)
    )
    return np.tensordot(view[index], w3, axes=([1, 5, 6, 7], [1, 2, 3, 4]))


def conv4d_decomposed(spec: Conv4dSpec, params: Conv4dParams, x: np.ndarray) -> np.ndarray:
    """Sum over temporal kernel offsets of 3D convolutions on shifted time slabs."""
    out_ext = _check(spec, params, x)
    t_out = out_ext[0]
    s_t = spec.stride[0]
    xp = _pad(x, spec.padding)
    n_batch, cin = xp.shape[:2]
    acc = np.zeros((n_batch, t_out) + out_ext[1:] + (spec.out_channels,),
                   dtype=np.result_type(_dtype(x, params), np.float32))
    for dt in range(spec.kernel[0]):
        slab = xp[:, :, dt:dt + (t_out - 1) * s_t + 1:s_t]
        # fold time into the batch axis: (N*T', Cin, X, Y, Z)
        slab = slab.transpose(0, 2, 1, 3, 4, 5).reshape((n_batch * t_out, cin) + xp.shape[3:])
        part = _conv3d_gemm(slab, params.weight[:, :, dt], spec.stride[1:], out_ext[1:])
        acc += part.reshape(acc.shape)
    out = acc.transpose(0, 5, 1, 2, 3, 4) + params.bias.reshape(1, -1, 1, 1, 1, 1)
    return np.ascontiguousarray(out, dtype=_dtype(x, params))


def conv4d_backward(spec: Conv4dSpec, params: Conv4dParams, x: np.ndarray, grad_out: np.ndarray):
    """Vector-Jacobian products of ``conv4d_forward``.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    out_ext = _check(spec, params, x)
    expected = (x.shape[0], spec.out_channels) + out_ext
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    dtype = _dtype(x, params)
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4, 5)).astype(dtype)

    if spec.is_pointwise():
        w = params.weight.reshape(spec.out_channels, spec.in_channels)
        grad_weight = np.tensordot(grad_out, x, axes=([0, 2, 3, 4, 5], [0, 2, 3, 4, 5]))
        grad_input = np.tensordot(w, grad_out, axes=([0], [1])).transpose(1, 0, 2, 3, 4, 5)
        return (np.ascontiguousarray(grad_input, dtype=dtype),
                grad_weight.reshape(spec.weight_shape).astype(dtype), grad_bias)

    xp = _pad(x, spec.padding)
    cols = _windows(xp, spec.kernel, spec.stride, out_ext)
    grad_weight = np.tensordot(grad_out, cols, axes=([0, 2, 3, 4, 5], [0, 2, 3, 4, 5]))

    # col2im: scatter each kernel tap's contribution back onto the padded input
    gcols = np.tensordot(params.weight, grad_out, axes=([0], [1]))  # (Cin, kT..kZ, N, T'..Z')
    gpad = np.zeros((xp.shape[1], xp.shape[0]) + xp.shape[2:], dtype=gcols.dtype)
    for offs in itertools.product(*(range(k) for k in spec.kernel)):
        index = (slice(None), slice(None)) + tuple(
            slice(d, d + (o - 1) * s + 1, s) for d, o, s in zip(offs, out_ext, spec.stride)
        )
        gpad[index] += gcols[(slice(None),) + offs]
    crop = tuple(slice(p, p + n) for p, n in zip(spec.padding, x.shape[2:]))
    grad_input = gpad[(slice(None), slice(None)) + crop].transpose(1, 0, 2, 3, 4, 5)
    return (np.ascontiguousarray(grad_input, dtype=dtype),
            np.ascontiguousarray(grad_weight, dtype=dtype), grad_bias)


# -- 3D convolution: kT = 1 on a singleton time axis ---------------------------

def conv3d_spec(in_channels, out_channels, kernel=3, stride=1, padding=0) -> Conv4dSpec:
    k, s, p = (np.broadcast_to(v, 3).tolist() for v in (kernel, stride, padding))
    return Conv4dSpec(in_channels, out_channels, (1, *k), (1, *s), (0, *p))


def conv3d_forward(spec: Conv4dSpec, params: Conv4dParams, x: np.ndarray) -> np.ndarray:
    """``x`` is (N, C, X, Y, Z); ``spec`` must have kT = 1."""
    if spec.kernel[0] != 1:
        raise GeometryError("3D convolution requires kT = 1")
    if x.ndim != 5:
        raise ShapeError(f"expected (N, C, X, Y, Z) input, got shape {x.shape}")
    return conv4d_forward(spec, params, x[:, :, None])[:, :, 0]


def conv3d_backward(spec, params, x, grad_out):
    gi, gw, gb = conv4d_backward(spec, params, x[:, :, None], grad_out[:, :, None])
    return gi[:, :, 0], gw, gb


# -- pooling -------------------------------------------------------------------

def _pool_geometry(window, stride, x):
    window = _quad(window, "window", 1)
    stride = _quad(window if stride is None else stride, "stride", 1)
    if x.ndim != 6:
        raise ShapeError(f"expected (N, C, T, X, Y, Z) input, got shape {x.shape}")
    out = []
    for axis, n, w, s in zip("TXYZ", x.shape[2:], window, stride):
        if n < w:
            raise GeometryError(f"axis {axis}: extent {n} smaller than pooling window {w}")
        out.append((n - w) // s + 1)
    return window, stride, tuple(out)


def pool4d(kind: str, window, stride, x: np.ndarray) -> np.ndarray:
    """Windowed max or mean per channel, no padding."""
    window, stride, out_ext = _pool_geometry(window, stride, x)
    cols = _windows(x, window, stride, out_ext)
    if kind == "max":
        return np.ascontiguousarray(cols.max(axis=(6, 7, 8, 9)))
    if kind == "avg":
        return np.ascontiguousarray(cols.mean(axis=(6, 7, 8, 9), dtype=x.dtype))
    raise ValueError(f"unknown pooling kind {kind!r}")


def pool4d_backward(kind: str, window, stride, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Max routes each gradient to the window's argmax (lowest linear index on
    ties); avg spreads it uniformly."""
    window, stride, out_ext = _pool_geometry(window, stride, x)
    if grad_out.shape != x.shape[:2] + out_ext:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {x.shape[:2] + out_ext}")
    grad = np.zeros_like(x)
    if kind == "avg":
        share = grad_out / np.prod(window)
        for offs in itertools.product(*(range(w) for w in window)):
            index = (slice(None), slice(None)) + tuple(
                slice(d, d + (o - 1) * s + 1, s) for d, o, s in zip(offs, out_ext, stride)
            )
            grad[index] += share
        return grad
    if kind != "max":
        raise ValueError(f"unknown pooling kind {kind!r}")
    cols = _windows(x, window, stride, out_ext)
    flat = cols.reshape(cols.shape[:6] + (-1,))
    arg = flat.argmax(axis=-1)  # first occurrence == lowest linear index
    local = np.unravel_index(arg, window)
    grid = np.meshgrid(*(np.arange(d) for d in grad_out.shape), indexing="ij")
    coords = tuple(grid[:2]) + tuple(
        grid[2 + a] * stride[a] + local[a] for a in range(4)
    )
    np.add.at(grad, coords, grad_out)
    return grad


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over every axis after the channel axis: (N, C, ...) -> (N, C)."""
    if x.ndim < 3:
        raise ShapeError(f"expected (N, C, ...) input, got shape {x.shape}")
    axes = tuple(range(2, x.ndim))
    return x.mean(axis=axes, dtype=x.dtype)


def global_avg_pool_backward(input_shape, grad_out: np.ndarray) -> np.ndarray:
    count = int(np.prod(input_shape[2:]))
    g = (grad_out / grad_out.dtype.type(count)).reshape(grad_out.shape + (1,) * (len(input_shape) - 2))
    return np.ascontiguousarray(np.broadcast_to(g, input_shape))
