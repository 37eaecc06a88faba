"""Grad-CAM++ saliency over 4D activations and first-layer kernel views.

Grad-CAM++ channel-pixel weights use the closed form obtained when the class
score is passed through an exponential, which turns the second and third
derivatives into powers of the first-order gradient G:

    alpha = G^2 / (2 G^2 + sum_positions(A * G^3))

per channel, then u_k = sum_positions(alpha * relu(G)) and
map = relu(sum_k u_k A_k), max-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .models import Block, Conv, Model

DEFAULT_LAYER = "stage2.block2"
METHODS = ("gradcam++", "gradcam")


@dataclass
class SaliencyResult:
    map4d: np.ndarray  # (Ta, Xa, Ya, Za), activation resolution
    upsampled: np.ndarray  # (T, X, Y, Z), input resolution
    temporal_signal: np.ndarray  # (T,)
    target_class: int
    layer: str
    channel_weights: np.ndarray  # (K,)
    raw_max: float


@dataclass
class KernelView:
    channel: int
    offset: tuple  # (dx, dy, dz)
    profile: np.ndarray  # (kT,)
    tag: str


def channel_weights(A, G, method="gradcam++"):
    """Per-channel importance u_k from activations and gradients shaped
    (K, ...positions)."""
    if A.shape != G.shape:
        raise ShapeError(f"activation {A.shape} and gradient {G.shape} differ")
    k = A.shape[0]
    A2 = A.reshape(k, -1).astype(np.float64)
    G2 = G.reshape(k, -1).astype(np.float64)
    if method == "gradcam":
        return G2.mean(axis=1)
    if method != "gradcam++":
        raise ConfigError(f"unknown saliency method {method!r}; choose from {METHODS}")
    g2 = G2 * G2
    denom = 2.0 * g2 + (A2 * g2 * G2).sum(axis=1, keepdims=True)
    safe = np.where(denom != 0.0, denom, 1.0)
    alpha = np.where(denom != 0.0, g2 / safe, 0.0)
    return (alpha * np.maximum(G2, 0.0)).sum(axis=1)


def cam_from_activation(A, G, method="gradcam++"):
    """``(normalized map, channel weights, raw max)`` for (K, ...) inputs."""
    u = channel_weights(A, G, method)
    raw = np.maximum(np.tensordot(u, A.astype(np.float64), axes=([0], [0])), 0.0)
    peak = float(raw.max()) if raw.size else 0.0
    cam = raw / peak if peak > 0 else np.zeros_like(raw)
    return cam, u, peak


def upsample_linear(a, out_shape, scale):
    """Separable linear interpolation. Activation index i sits at input
    coordinate i * scale on each axis; values beyond the last index are held."""
    out = a.astype(np.float64)
    for axis, (n_out, s) in enumerate(zip(out_shape, scale)):
        n_in = out.shape[axis]
        if n_in == 1:
            out = np.repeat(out, n_out, axis=axis)
            continue
        src = np.arange(n_out) / float(s)
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        w = np.clip(src - i0, 0.0, 1.0)
        shape = [1] * out.ndim
        shape[axis] = n_out
        w = w.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1 - w) + np.take(out, i1, axis=axis) * w
    return out


def layer_scale(model: Model, layer: str):
    """Cumulative (T, X, Y, Z) stride from the model input to ``layer``."""
    scale = np.ones(4, dtype=int)
    found = False
    for item in model.trunk:
        parts = [item]
        if isinstance(item, Block):
            parts = [item.conv, item.pw1, item.pw2, item]
        for part in parts:
            if isinstance(part, Conv):
                stride = np.array(part.spec.stride)
                if model.kind != "4d":
                    stride[0] = 1
                scale *= stride
            if part.name == layer:
                found = True
                break
        if found:
            break
    if not found:
        raise ConfigError(f"unknown layer {layer!r}; choose from {model.layer_names()}")
    return tuple(int(s) for s in scale)


def _to_channel_first(model: Model, act, t_len):
    """Model activation for one sample -> (K, Ta, Xa, Ya, Za)."""
    if model.kind == "4d":
        return act[0]
    if model.kind == "3d-chan":
        return act[0]  # singleton time axis
    # 3d-lstm: (T, K, 1, X, Y, Z) frames of one sample
    return act[:t_len, :, 0].transpose(1, 0, 2, 3, 4)


def gradcampp_4d(model: Model, x, target_class, layer=DEFAULT_LAYER, method="gradcam++"):
    """Saliency for one input volume (T, X, Y, Z), (1, T, X, Y, Z) or
    (1, 1, T, X, Y, Z) toward ``target_class``."""
    x = np.asarray(x)
    x = x.reshape((1, 1) + x.shape[-4:])
    if not 0 <= target_class < model.config.num_classes:
        raise RangeError(f"target_class {target_class} outside [0, {model.config.num_classes})")
    if layer not in model.layer_names():
        raise ConfigError(f"unknown layer {layer!r}; choose from {model.layer_names()}")
    logits, cache = model.forward(x, capture=[layer])
    onehot = np.zeros_like(logits)
    onehot[0, target_class] = 1.0
    model.backward(cache, onehot)
    tape = cache["tape"]
    t_len = x.shape[2]
    A = _to_channel_first(model, tape.acts[layer], t_len)
    G = _to_channel_first(model, tape.grads[layer], t_len)
    cam, u, peak = cam_from_activation(A, G, method)
    scale = layer_scale(model, layer)
    up = upsample_linear(cam, x.shape[2:], scale)
    return SaliencyResult(cam, up, up.mean(axis=(1, 2, 3)), int(target_class), layer, u, peak)


def temporal_saliency_with_roi(result: SaliencyResult, roi_mask, x):
    """Mean BOLD and mean saliency over the masked voxels at every time point."""
    mask = np.asarray(roi_mask).astype(bool)
    vol = np.asarray(x)
    vol = vol.reshape(vol.shape[-4:])
    if mask.shape != vol.shape[1:] or mask.shape != result.upsampled.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match volume {vol.shape[1:]}")
    if not mask.any():
        raise RangeError("empty ROI mask")
    return vol[:, mask].mean(axis=1), result.upsampled[:, mask].mean(axis=1)


# -- first-layer kernels -----------------------------------------------------

def classify_profile(profile, zero_sum_tol=0.2, min_l1=1e-3, min_ratio=0.2):
    """Tag a temporal kernel profile.

    * ``other`` when sum |w| < ``min_l1`` (too small to read)
    * ``derivative`` when |sum w| <= zero_sum_tol * sum |w| and the sign changes
    * ``average`` when all taps share a sign and every |w| >= min_ratio * max |w|
    * ``other`` otherwise
    """
    w = np.asarray(profile, dtype=np.float64)
    l1 = np.abs(w).sum()
    if l1 < min_l1:
        return "other"
    if abs(w.sum()) <= zero_sum_tol * l1 and w.max() > 0 > w.min():
        return "derivative"
    mag = np.abs(w)
    if (np.all(w > 0) or np.all(w < 0)) and mag.min() >= min_ratio * mag.max():
        return "average"
    return "other"


def extract_first_layer_kernels(model: Model, channels, offsets=None, seed=0,
                                per_channel=3, in_channel=0):
    """Temporal profiles w[c, in_channel, :, dx, dy, dz] of the first Conv4D.

    ``offsets`` fixes the spatial taps; otherwise ``per_channel`` random
    offsets are drawn per channel from ``seed``.
    """
    first = model.trunk[0]
    weight = model.params[f"{first.name}.weight"]
    cout, cin, kt, kx, ky, kz = weight.shape
    if not 0 <= in_channel < cin:
        raise RangeError(f"in_channel {in_channel} outside [0, {cin})")
    rng = np.random.default_rng(seed)
    views = []
    for c in channels:
        if not 0 <= c < cout:
            raise RangeError(f"channel {c} outside [0, {cout})")
        if offsets is None:
            chosen = [tuple(int(v) for v in rng.integers(0, (kx, ky, kz))) for _ in range(per_channel)]
        else:
            chosen = [tuple(o) for o in offsets]
        for dx, dy, dz in chosen:
            if not (0 <= dx < kx and 0 <= dy < ky and 0 <= dz < kz):
                raise RangeError(f"offset {(dx, dy, dz)} outside kernel {(kx, ky, kz)}")
            profile = weight[c, in_channel, :, dx, dy, dz].copy()
            views.append(KernelView(int(c), (dx, dy, dz), profile, classify_profile(profile)))
    return views
