"""The three classifiers compared on 4D fMRI volumes.

* ``"4d"`` (Model A): Conv4D stem and four stages of joint temporal-spatial
  residual blocks, global average pool, linear head.
* ``"3d-lstm"`` (Model B): one shared 3D CNN applied to every time sample,
  pooled per-sample features stacked into a sequence S, an LSTM over S, and a
  linear head on the last hidden state.
* ``"3d-chan"`` (Model C): time samples become input channels of a 3D CNN.

All three share the same stage recipe. 3D convolutions run through the 4D
kernel with kT = 1 on a singleton time axis, so every model is a stack of the
same layer objects.

Parameters live in one ordered ``dict`` of named arrays (stem, stages in
order, head). Layer objects hold only geometry.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .conv4d import (
    Conv4dParams,
    Conv4dSpec,
    conv4d_backward,
    conv4d_forward,
    global_avg_pool,
    global_avg_pool_backward,
)
from .errors import ConfigError, GeometryError, ShapeError

MODEL_KINDS = ("4d", "3d-lstm", "3d-chan")


@dataclass
class ModelConfig:
    stage_depths: tuple = (1, 1, 3, 1)
    stage_channels: tuple = (128, 256, 512, 1024)
    stem_channels: int = 128
    final_channels: int = 1024
    num_classes: int = 3
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    lstm_hidden: int = 256
    input_geometry: tuple = (120, 65, 77, 65)
    expansion: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_geometry = tuple(int(g) for g in self.input_geometry)
        if len(self.stage_depths) != 4 or len(self.stage_channels) != 4:
            raise ConfigError("stage_depths and stage_channels need exactly 4 entries")
        if self.stem_channels != self.stage_channels[0]:
            raise ConfigError("stem_channels must equal the first stage width")
        if self.final_channels != self.stage_channels[-1]:
            raise ConfigError("final_channels must equal the last stage width")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.input_geometry) != 4 or min(self.input_geometry) < 1:
            raise ConfigError(f"input_geometry must be 4 positive extents, got {self.input_geometry}")
        if self.spatial_kernel < 1 or self.temporal_kernel < 1:
            raise ConfigError("kernel extents must be positive")

    @classmethod
    def tiny(cls, **overrides):
        """Channel ladder (4, 8, 16, 32) on 8^4 inputs, for tests."""
        base = dict(stage_channels=(4, 8, 16, 32), stem_channels=4, final_channels=32,
                    lstm_hidden=8, input_geometry=(8, 8, 8, 8))
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class _Tape:
    """Records activations on the forward pass and their gradients on the
    backward pass for the layer names listed in ``capture``."""

    def __init__(self, capture=()):
        self.capture = set(capture)
        self.acts = {}
        self.grads = {}

    def act(self, name, value):
        if name in self.capture:
            self.acts[name] = value

    def grad(self, name, value):
        if name in self.capture:
            self.grads[name] = value


# -- layers ------------------------------------------------------------------

class Conv:
    def __init__(self, name, spec: Conv4dSpec):
        self.name, self.spec = name, spec

    def init(self, rng, dtype):
        p = nn.init_params("conv", self.spec, rng, dtype)
        return {f"{self.name}.weight": p.weight, f"{self.name}.bias": p.bias}

    def _params(self, params):
        return Conv4dParams(params[f"{self.name}.weight"], params[f"{self.name}.bias"])

    def forward(self, params, x, tape):
        y = conv4d_forward(self.spec, self._params(params), x)
        tape.act(self.name, y)
        return y, x

    def backward(self, params, cache, gy, grads, tape):
        tape.grad(self.name, gy)
        gx, gw, gb = conv4d_backward(self.spec, self._params(params), cache, gy)
        grads[f"{self.name}.weight"] = gw
        grads[f"{self.name}.bias"] = gb
        return gx


class LayerNorm:
    """Normalizes the channel axis (axis 1) at every position."""

    def __init__(self, name, channels, eps):
        self.name, self.channels, self.eps = name, channels, eps

    def init(self, rng, dtype):
        gamma, beta = nn.init_params("layernorm", (self.channels,), rng, dtype)
        return {f"{self.name}.gamma": gamma, f"{self.name}.beta": beta}

    def forward(self, params, x, tape):
        y = nn.layernorm_forward(x, params[f"{self.name}.gamma"], params[f"{self.name}.beta"],
                                 axis=1, eps=self.eps)
        return y, x

    def backward(self, params, cache, gy, grads, tape):
        gx, gg, gb = nn.layernorm_backward(cache, params[f"{self.name}.gamma"],
                                           params[f"{self.name}.beta"], gy, axis=1, eps=self.eps)
        grads[f"{self.name}.gamma"] = gg
        grads[f"{self.name}.beta"] = gb
        return gx


class Block:
    """Residual block: conv (channel-preserving) -> layernorm -> pointwise x4
    expansion -> GELU -> pointwise contraction, plus the identity path."""

    def __init__(self, name, channels, kernel, expansion, eps):
        self.name = name
        pad = tuple(k // 2 for k in kernel)
        self.conv = Conv(f"{name}.conv", Conv4dSpec(channels, channels, kernel, 1, pad))
        self.norm = LayerNorm(f"{name}.norm", channels, eps)
        self.pw1 = Conv(f"{name}.pw1", Conv4dSpec(channels, expansion * channels, 1))
        self.pw2 = Conv(f"{name}.pw2", Conv4dSpec(expansion * channels, channels, 1))
        self.parts = (self.conv, self.norm, self.pw1, self.pw2)

    def init(self, rng, dtype):
        out = {}
        for part in self.parts:
            out.update(part.init(rng, dtype))
        return out

    def forward(self, params, x, tape):
        h1, c1 = self.conv.forward(params, x, tape)
        h2, c2 = self.norm.forward(params, h1, tape)
        h3, c3 = self.pw1.forward(params, h2, tape)
        h4 = nn.gelu_forward(h3)
        h5, c5 = self.pw2.forward(params, h4, tape)
        y = x + h5
        tape.act(self.name, y)
        return y, (c1, c2, c3, h3, c5)

    def backward(self, params, cache, gy, grads, tape):
        tape.grad(self.name, gy)
        c1, c2, c3, h3, c5 = cache
        g = self.pw2.backward(params, c5, gy, grads, tape)
        g = nn.gelu_backward(h3, g)
        g = self.pw1.backward(params, c3, g, grads, tape)
        g = self.norm.backward(params, c2, g, grads, tape)
        g = self.conv.backward(params, c1, g, grads, tape)
        return gy + g


def _trunk_layers(config: ModelConfig, in_channels, temporal):
    """Stem + 4 stages. ``temporal=False`` builds the 3D variant (kT = 1,
    no striding in time)."""
    k = config.spatial_kernel
    kt = config.temporal_kernel if temporal else 1
    kernel = (kt, k, k, k)
    pad = tuple(e // 2 for e in kernel)
    down = (2 if temporal else 1, 2, 2, 2)
    eps = config.ln_eps
    chans = config.stage_channels
    layers = [
        Conv("stem.conv", Conv4dSpec(in_channels, chans[0], kernel, down, pad)),
        LayerNorm("stem.norm", chans[0], eps),
    ]
    for s, (depth, c) in enumerate(zip(config.stage_depths, chans)):
        if s > 0:
            layers.append(LayerNorm(f"stage{s}.down_norm", chans[s - 1], eps))
            layers.append(Conv(f"stage{s}.down", Conv4dSpec(chans[s - 1], c, kernel, down, pad)))
        for b in range(depth):
            layers.append(Block(f"stage{s}.block{b}", c, kernel, config.expansion, eps))
    return layers


def _stage_of(name):
    return name.split(".")[0]


class Model:
    """Shared forward/backward/parameter interface of the three classifiers."""

    def __init__(self, kind, config: ModelConfig, seed=0, dtype=np.float32):
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
        self.kind, self.config = kind, config
        t = config.input_geometry[0]
        in_channels = {"4d": 1, "3d-lstm": 1, "3d-chan": t}[kind]
        self.trunk = _trunk_layers(config, in_channels, temporal=(kind == "4d"))
        self.feature_norm = LayerNorm("head.norm", config.final_channels, config.ln_eps)
        self.trunk_shapes = self._check_geometry()
        rng = np.random.default_rng(seed)
        params = {}
        for layer in self.trunk:
            params.update(layer.init(rng, dtype))
        params.update(self.feature_norm.init(rng, dtype))
        if kind == "3d-lstm":
            lstm = nn.init_params("lstm", (config.final_channels, config.lstm_hidden), rng, dtype)
            params.update({"lstm.w_ih": lstm.w_ih, "lstm.w_hh": lstm.w_hh, "lstm.bias": lstm.bias})
            head_in = config.lstm_hidden
        else:
            head_in = config.final_channels
        head = nn.init_params("linear", (config.num_classes, head_in), rng, dtype)
        params.update({"head.weight": head.weight, "head.bias": head.bias})
        self.params = params

    # -- geometry -------------------------------------------------------------

    def trunk_input_shape(self, n=1):
        t, x, y, z = self.config.input_geometry
        if self.kind == "4d":
            return (n, 1, t, x, y, z)
        if self.kind == "3d-chan":
            return (n, t, 1, x, y, z)
        return (n * t, 1, 1, x, y, z)

    def _check_geometry(self):
        shape = self.trunk_input_shape()
        shapes = {}
        for layer in self.trunk:
            if isinstance(layer, Conv):
                try:
                    ext = layer.spec.output_extents(shape[2:])
                except GeometryError as err:
                    raise GeometryError(
                        f"input geometry {self.config.input_geometry} does not survive "
                        f"{_stage_of(layer.name)} ({layer.name}): {err}") from None
                shape = (shape[0], layer.spec.out_channels) + ext
            shapes[layer.name] = shape
        return shapes

    def layer_names(self):
        names = []
        for layer in self.trunk:
            names.append(layer.name)
            if isinstance(layer, Block):
                names.extend(p.name for p in (layer.conv, layer.pw1, layer.pw2))
        return names

    # -- parameters -----------------------------------------------------------

    def collect_parameters(self):
        return list(self.params.items())

    def count_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        clone = object.__new__(Model)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    # -- forward / backward ---------------------------------------------------

    def _check_input(self, x):
        expected = (1,) + self.config.input_geometry
        if x.ndim != 6 or x.shape[1:] != expected:
            raise ShapeError(f"{self.kind} model expects (N, {', '.join(map(str, expected))}), "
                             f"got {x.shape}")

    def forward(self, x, capture=()):
        """Return ``(logits, cache)``. ``capture`` names trunk activations to
        record (see ``layer_names``); they appear in ``cache['tape'].acts``."""
        self._check_input(x)
        p = self.params
        tape = _Tape(capture)
        n, _, t = x.shape[:3]
        if self.kind == "4d":
            h = x
        elif self.kind == "3d-chan":
            h = x.reshape(n, t, 1, *x.shape[3:])
        else:
            h = x.reshape(n * t, 1, 1, *x.shape[3:])
        caches = []
        for layer in self.trunk:
            h, c = layer.forward(p, h, tape)
            caches.append(c)
        trunk_out_shape = h.shape
        feats = global_avg_pool(h)
        normed, _ = self.feature_norm.forward(p, feats, tape)
        cache = {"x_shape": x.shape, "trunk": caches, "trunk_out_shape": trunk_out_shape,
                 "feats": feats, "tape": tape}
        if self.kind == "3d-lstm":
            S = normed.reshape(n, t, -1)
            head_in = nn.lstm_sequence(self._lstm(), S)
            cache["S"] = S
        else:
            head_in = normed
        cache["head_in"] = head_in
        logits = nn.linear_forward(self._head(), head_in)
        return logits, cache

    def _head(self):
        return nn.LinearParams(self.params["head.weight"], self.params["head.bias"])

    def _lstm(self):
        p = self.params
        return nn.LstmParams(p["lstm.w_ih"], p["lstm.w_hh"], p["lstm.bias"])

    def features(self, x):
        """Pooled trunk features before the head: (N, final_channels), or
        (N, T, final_channels) for the LSTM model (the sequence S)."""
        _, cache = self.forward(x)
        if self.kind == "3d-lstm":
            return cache["S"]
        return cache["feats"]

    def backward(self, cache, grad_logits, need_input_grad=False):
        """Return a dict of parameter gradients (same keys as ``params``).

        Gradients of captured activations land in ``cache['tape'].grads``;
        with ``need_input_grad`` the input gradient is stored under ``'input'``.
        """
        p = self.params
        tape = cache["tape"]
        grads = {}
        g, gw, gb = nn.linear_backward(self._head(), cache["head_in"], grad_logits)
        grads["head.weight"], grads["head.bias"] = gw, gb
        if self.kind == "3d-lstm":
            gS, lg = nn.lstm_sequence_backward(self._lstm(), cache["S"], g)
            grads.update({"lstm.w_ih": lg.w_ih, "lstm.w_hh": lg.w_hh, "lstm.bias": lg.bias})
            g = gS.reshape(-1, gS.shape[-1])
        g = self.feature_norm.backward(p, cache["feats"], g, grads, tape)
        g = global_avg_pool_backward(cache["trunk_out_shape"], g)
        for layer, c in zip(reversed(self.trunk), reversed(cache["trunk"])):
            g = layer.backward(p, c, g, grads, tape)
        if need_input_grad:
            grads["input"] = g.reshape(cache["x_shape"])
        return {k: grads[k] for k in list(p) + (["input"] if need_input_grad else [])}

    def __call__(self, x):
        return self.forward(x)[0]


def build_model(kind, config: ModelConfig, seed=0, dtype=np.float32) -> Model:
    return Model(kind, config, seed=seed, dtype=dtype)


def _forward_kind(model: Model, kind, x):
    if model.kind != kind:
        raise ConfigError(f"expected a {kind!r} model, got {model.kind!r}")
    return model.forward(x)


def model_a_forward(model: Model, x):
    return _forward_kind(model, "4d", x)


def model_b_forward(model: Model, x):
    return _forward_kind(model, "3d-lstm", x)


def model_c_forward(model: Model, x):
    return _forward_kind(model, "3d-chan", x)


def stage_depths_of(model: Model):
    """Count residual blocks per stage from the built layer list."""
    depths = [0, 0, 0, 0]
    for layer in model.trunk:
        if isinstance(layer, Block):
            depths[int(layer.name[len("stage")])] += 1
    return depths


def first_layer_channels(model: Model):
    return model.trunk[0].spec.out_channels
