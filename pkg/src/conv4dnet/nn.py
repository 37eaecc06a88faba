"""Non-convolutional layers with explicit backward passes.

Forward functions are pure. Backward functions take the forward inputs plus
the upstream gradient and recompute whatever intermediates they need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conv4d import Conv4dParams, Conv4dSpec
from .errors import ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class LstmParams:
    """Gate blocks are stacked in the order input, forget, cell, output."""

    w_ih: np.ndarray  # (4h, in)
    w_hh: np.ndarray  # (4h, h)
    bias: np.ndarray  # (4h,)

    @property
    def hidden(self):
        return self.w_hh.shape[1]


# -- layer norm ------------------------------------------------------------

def _ln_stats(x, axis, eps):
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xc, inv


def _affine_shape(x, axis):
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return shape


def layernorm_forward(x, gamma, beta, axis=1, eps=1e-6):
    """Normalize over ``axis`` independently at every other index."""
    axis = axis % x.ndim
    if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
        raise ShapeError(f"gamma/beta must have length {x.shape[axis]}")
    xc, inv = _ln_stats(x, axis, eps)
    shape = _affine_shape(x, axis)
    return xc * inv * gamma.reshape(shape) + beta.reshape(shape)


def layernorm_backward(x, gamma, beta, grad_out, axis=1, eps=1e-6):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    axis = axis % x.ndim
    xc, inv = _ln_stats(x, axis, eps)
    xhat = xc * inv
    others = tuple(a for a in range(x.ndim) if a != axis)
    grad_gamma = (grad_out * xhat).sum(axis=others)
    grad_beta = grad_out.sum(axis=others)
    g = grad_out * gamma.reshape(_affine_shape(x, axis))
    grad_x = inv * (g - g.mean(axis=axis, keepdims=True)
                    - xhat * (g * xhat).mean(axis=axis, keepdims=True))
    return grad_x.astype(x.dtype), grad_gamma.astype(x.dtype), grad_beta.astype(x.dtype)


# -- GELU (tanh approximation) ---------------------------------------------

def _gelu_tanh(x):
    c = x.dtype.type(_SQRT_2_OVER_PI)
    inner = x * x
    inner *= x.dtype.type(_GELU_C)
    inner += 1.0
    inner *= x
    inner *= c
    return np.tanh(inner, out=inner)


def gelu_forward(x):
    th = _gelu_tanh(x)
    th += 1.0
    th *= x
    th *= 0.5
    return th


def gelu_backward(x, grad_out):
    th = _gelu_tanh(x)
    x2 = x * x
    # d/dx [0.5 x (1 + tanh(u))] with u = c (x + k x^3)
    dinner = x2 * x.dtype.type(3 * _GELU_C * _SQRT_2_OVER_PI)
    dinner += x.dtype.type(_SQRT_2_OVER_PI)
    sech2 = 1.0 - th * th
    out = 0.5 * (1.0 + th)
    out += 0.5 * x * sech2 * dinner
    out *= grad_out
    return out


# -- linear ----------------------------------------------------------------

def linear_forward(params: LinearParams, x):
    if x.ndim != 2 or x.shape[1] != params.weight.shape[1]:
        raise ShapeError(f"linear expects (N, {params.weight.shape[1]}), got {x.shape}")
    return x @ params.weight.T + params.bias


def linear_backward(params: LinearParams, x, grad_out):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    if grad_out.shape != (x.shape[0], params.weight.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match linear output")
    return grad_out @ params.weight, grad_out.T @ x, grad_out.sum(axis=0)


# -- softmax ---------------------------------------------------------------

def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(x, grad_out):
    p = softmax(x)
    return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True))


# -- LSTM ------------------------------------------------------------------

def sigmoid(x):
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _gates(params, x_t, h_prev):
    h = params.hidden
    z = x_t @ params.w_ih.T + h_prev @ params.w_hh.T + params.bias
    i = sigmoid(z[:, :h])
    f = sigmoid(z[:, h:2 * h])
    g = np.tanh(z[:, 2 * h:3 * h])
    o = sigmoid(z[:, 3 * h:])
    return i, f, g, o


def lstm_step(params: LstmParams, x_t, h_prev, c_prev):
    """One time step on a batch: (N, in), (N, h), (N, h) -> (h_t, c_t)."""
    if x_t.shape[-1] != params.w_ih.shape[1]:
        raise ShapeError(f"LSTM input width {x_t.shape[-1]} != {params.w_ih.shape[1]}")
    i, f, g, o = _gates(params, x_t, h_prev)
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t


def _as_batch(S):
    if S.ndim == 2:
        return S[None], True
    if S.ndim == 3:
        return S, False
    raise ShapeError(f"feature sequence must be (T, F) or (N, T, F), got {S.shape}")


def lstm_sequence(params: LstmParams, S):
    """Run from zero state over ``S`` of shape (T, F) or (N, T, F); return the
    final hidden state, (h,) or (N, h)."""
    Sb, single = _as_batch(S)
    n = Sb.shape[0]
    h = np.zeros((n, params.hidden), dtype=Sb.dtype)
    c = np.zeros_like(h)
    for t in range(Sb.shape[1]):
        h, c = lstm_step(params, Sb[:, t], h, c)
    return h[0] if single else h


def lstm_sequence_backward(params: LstmParams, S, grad_h_last):
    """Backpropagation through time for ``lstm_sequence``.

    Returns ``(grad_S, LstmParams-shaped gradients)``.
    """
    Sb, single = _as_batch(S)
    gh = grad_h_last[None] if single else grad_h_last
    n, steps = Sb.shape[:2]
    hid = params.hidden
    hs = [np.zeros((n, hid), dtype=Sb.dtype)]
    cs = [np.zeros((n, hid), dtype=Sb.dtype)]
    acts = []
    for t in range(steps):
        i, f, g, o = _gates(params, Sb[:, t], hs[-1])
        c = f * cs[-1] + i * g
        acts.append((i, f, g, o))
        cs.append(c)
        hs.append(o * np.tanh(c))

    g_wih = np.zeros_like(params.w_ih)
    g_whh = np.zeros_like(params.w_hh)
    g_b = np.zeros_like(params.bias)
    grad_S = np.zeros_like(Sb)
    dh = gh.copy()
    dc = np.zeros_like(dh)
    for t in reversed(range(steps)):
        i, f, g, o = acts[t]
        tc = np.tanh(cs[t + 1])
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * cs[t]
        dg = dc * i
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                             dg * (1 - g * g), do * o * (1 - o)], axis=1)
        g_wih += dz.T @ Sb[:, t]
        g_whh += dz.T @ hs[t]
        g_b += dz.sum(axis=0)
        grad_S[:, t] = dz @ params.w_ih
        dh = dz @ params.w_hh
        dc = dc * f
    grads = LstmParams(g_wih, g_whh, g_b)
    return (grad_S[0] if single else grad_S), grads


# -- initialization --------------------------------------------------------

def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(kind, dims, rng_seed=0, dtype=np.float32):
    """Fan-in uniform weights (bound sqrt(1/fan_in)) and zero biases.

    ``kind``/``dims``: ``"linear"`` with (out, in); ``"conv"`` with a
    Conv4dSpec; ``"lstm"`` with (in, hidden); ``"layernorm"`` with (dim,),
    which gives unit gamma and zero beta. ``rng_seed`` may be an int or a
    ``numpy.random.Generator`` (consumed in place).
    """
    rng = _rng(rng_seed)
    if kind == "linear":
        out_f, in_f = dims
        return LinearParams(_uniform(rng, (out_f, in_f), in_f, dtype), np.zeros(out_f, dtype))
    if kind == "conv":
        spec: Conv4dSpec = dims
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        return Conv4dParams(_uniform(rng, spec.weight_shape, fan_in, dtype),
                            np.zeros(spec.out_channels, dtype))
    if kind == "lstm":
        in_f, hid = dims
        return LstmParams(_uniform(rng, (4 * hid, in_f), in_f, dtype),
                          _uniform(rng, (4 * hid, hid), hid, dtype),
                          np.zeros(4 * hid, dtype))
    if kind == "layernorm":
        (dim,) = dims
        return np.ones(dim, dtype), np.zeros(dim, dtype)
    raise ValueError(f"unknown layer kind {kind!r}")
