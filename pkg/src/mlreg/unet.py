"""Small 3D U-Net displacement predictor with explicit forward/backward passes.

Activations use a channel-major layout ``(C, N, X, Y, Z)`` so every
convolution reduces to a handful of 2D matrix products.  Parameters are
stored in single precision; all arithmetic runs in double precision.

Layer layout for ``depth`` resolution levels::

    enc{s}_conv{k}  3x3x3 conv -> batch norm -> ReLU    (k < convs_per_stage)
    2x2x2 average pooling between encoder stages
    dec{s}_up       2x2x2 stride-2 transposed conv, concat with enc{s} output
    dec{s}_conv{k}  3x3x3 conv -> batch norm -> ReLU
    out             1x1x1 conv to 3 channels

The output is read as voxels of the input grid scaled by its spacing
(``output_units="voxel"``, the default) or directly as mm (``"mm"``).  With
voxel units one set of weights predicts proportionally sized motion on every
pyramid level, which is what coarse-to-fine weight reuse relies on.  Either
way the returned field is in mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from .fields import DisplacementField
from .grid import Volume

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
OUTPUT_DAMPING = 1e-3
OUTPUT_UNITS = ("mm", "voxel")
_OFFSETS3 = list(product(range(3), repeat=3))
_OFFSETS2 = list(product(range(2), repeat=3))


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_filters: int = 4
    convs_per_stage: int = 2
    input_channels: int = 2
    output_channels: int = 3
    output_units: str = "voxel"

    def __post_init__(self):
        for name in ("depth", "base_filters", "convs_per_stage", "input_channels", "output_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.output_units not in OUTPUT_UNITS:
            raise ValueError(f"output_units must be one of {OUTPUT_UNITS}, got {self.output_units!r}")

    def filters(self, stage: int) -> int:
        return self.base_filters * 2 ** stage

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


FULL_SCALE_CONFIG = UNetConfig(depth=3, base_filters=16)   # full-resolution lung setting


@dataclass
class NetWeights:
    config: UNetConfig
    params: dict = field(default_factory=dict)

    def trainable(self) -> list:
        return [k for k in self.params if not k.endswith((".mean", ".var"))]

    def copy(self) -> "NetWeights":
        return NetWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "NetWeights":
        return NetWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def num_trainable(self) -> int:
        return sum(self.params[k].size for k in self.trainable())


def layer_specs(cfg: UNetConfig) -> list:
    """Ordered ``(name, kind, in_channels, out_channels)`` for the whole net."""
    specs = []
    cin = cfg.input_channels
    for s in range(cfg.depth):
        if s:
            specs.append((f"pool{s}", "pool", cin, cin))
        for k in range(cfg.convs_per_stage):
            specs.append((f"enc{s}_conv{k}", "conv3", cin, cfg.filters(s)))
            cin = cfg.filters(s)
    for s in reversed(range(cfg.depth - 1)):
        specs.append((f"dec{s}_up", "up", cin, cfg.filters(s)))
        cin = 2 * cfg.filters(s)
        for k in range(cfg.convs_per_stage):
            specs.append((f"dec{s}_conv{k}", "conv3", cin, cfg.filters(s)))
            cin = cfg.filters(s)
    specs.append(("out", "conv1", cin, cfg.output_channels))
    return specs


def receptive_field(cfg: UNetConfig) -> int:
    """Receptive field of one output voxel, in voxels of the input grid."""
    size, jump = 1, 1
    for _, kind, _, _ in layer_specs(cfg):
        if kind == "conv3":
            size += 2 * jump
        elif kind == "pool":
            size += jump
            jump *= 2
        elif kind == "up":
            jump //= 2
    return size


def xavier_init(cfg: UNetConfig, seed: int = 0) -> NetWeights:
    """Xavier-uniform kernels, unit/zero batch norm, damped output layer."""
    rng = np.random.default_rng(seed)
    params = {}

    def uniform(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    for name, kind, cin, cout in layer_specs(cfg):
        if kind == "conv3":
            params[f"{name}.w"] = uniform((cout, cin, 3, 3, 3), cin * 27, cout * 27)
            params[f"{name}.gamma"] = np.ones(cout)
            params[f"{name}.beta"] = np.zeros(cout)
            params[f"{name}.mean"] = np.zeros(cout)
            params[f"{name}.var"] = np.ones(cout)
        elif kind == "up":
            params[f"{name}.w"] = uniform((cin, cout, 2, 2, 2), cout * 8, cin * 8)
            params[f"{name}.b"] = np.zeros(cout)
        elif kind == "conv1":
            params[f"{name}.w"] = OUTPUT_DAMPING * uniform((cout, cin, 1, 1, 1), cin, cout)
            params[f"{name}.b"] = np.zeros(cout)
    return NetWeights(cfg, {k: v.astype(np.float32) for k, v in params.items()})


# ---------------------------------------------------------------------------
# layer primitives, layout (C, N, X, Y, Z)

def _pad1(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))


def conv3_forward(x, w):
    """'Same' 3x3x3 convolution (cross-correlation), zero padding, no bias."""
    c, n, X, Y, Z = x.shape
    xp = _pad1(x)
    out = np.zeros((w.shape[0], n * X * Y * Z))
    for a, b, k in _OFFSETS3:
        out += w[:, :, a, b, k] @ xp[:, :, a:a + X, b:b + Y, k:k + Z].reshape(c, -1)
    return out.reshape((w.shape[0], n, X, Y, Z))


def conv3_backward(dout, x, w):
    c, n, X, Y, Z = x.shape
    xp = _pad1(x)
    d2 = dout.reshape(w.shape[0], -1)
    dw = np.zeros(w.shape)
    dxp = np.zeros(xp.shape)
    for a, b, k in _OFFSETS3:
        xs = xp[:, :, a:a + X, b:b + Y, k:k + Z].reshape(c, -1)
        dw[:, :, a, b, k] = d2 @ xs.T
        dxp[:, :, a:a + X, b:b + Y, k:k + Z] += (w[:, :, a, b, k].T @ d2).reshape(x.shape)
    return dxp[:, :, 1:-1, 1:-1, 1:-1], dw


def conv1_forward(x, w, bias):
    c = x.shape[0]
    out = w[:, :, 0, 0, 0] @ x.reshape(c, -1) + bias[:, None]
    return out.reshape((w.shape[0],) + x.shape[1:])


def conv1_backward(dout, x, w):
    c = x.shape[0]
    d2 = dout.reshape(w.shape[0], -1)
    dw = (d2 @ x.reshape(c, -1).T)[:, :, None, None, None]
    dx = (w[:, :, 0, 0, 0].T @ d2).reshape(x.shape)
    return dx, dw, d2.sum(axis=1)


def up_forward(x, w, bias):
    """2x2x2 transposed convolution with stride 2 (doubles each spatial dim)."""
    c, n, X, Y, Z = x.shape
    cout = w.shape[1]
    out = np.empty((cout, n, 2 * X, 2 * Y, 2 * Z))
    x2 = x.reshape(c, -1)
    for a, b, k in _OFFSETS2:
        out[:, :, a::2, b::2, k::2] = (w[:, :, a, b, k].T @ x2).reshape(cout, n, X, Y, Z)
    out += bias[:, None, None, None, None]
    return out


def up_backward(dout, x, w):
    c = x.shape[0]
    cout = w.shape[1]
    x2 = x.reshape(c, -1)
    dx = np.zeros((c, x2.shape[1]))
    dw = np.zeros(w.shape)
    for a, b, k in _OFFSETS2:
        d2 = dout[:, :, a::2, b::2, k::2].reshape(cout, -1)
        dx += w[:, :, a, b, k] @ d2
        dw[:, :, a, b, k] = x2 @ d2.T
    return dx.reshape(x.shape), dw, dout.sum(axis=(1, 2, 3, 4))


def pool_forward(x):
    c, n, X, Y, Z = x.shape
    return x.reshape(c, n, X // 2, 2, Y // 2, 2, Z // 2, 2).mean(axis=(3, 5, 7))


def pool_backward(dout):
    d = dout / 8.0
    return d.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def bn_forward(x, gamma, beta, mean, var, train):
    axes = (1, 2, 3, 4)
    if train:
        mu = x.mean(axis=axes)
        sigma2 = ((x - mu[:, None, None, None, None]) ** 2).mean(axis=axes)
    else:
        mu, sigma2 = mean, var
    inv = 1.0 / np.sqrt(sigma2 + BN_EPS)
    xhat = (x - mu[:, None, None, None, None]) * inv[:, None, None, None, None]
    out = gamma[:, None, None, None, None] * xhat + beta[:, None, None, None, None]
    return out, (xhat, inv, train), (mu, sigma2)


def bn_backward(dout, cache, gamma):
    xhat, inv, train = cache
    axes = (1, 2, 3, 4)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma[:, None, None, None, None]
    if not train:
        return dxhat * inv[:, None, None, None, None], dgamma, dbeta
    m = dout[0].size
    s1 = dxhat.sum(axis=axes)[:, None, None, None, None]
    s2 = (dxhat * xhat).sum(axis=axes)[:, None, None, None, None]
    dx = (inv[:, None, None, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# network

@dataclass
class Tape:
    config: UNetConfig
    train: bool
    records: list
    running: dict
    input_shape: tuple
    scale: tuple = (1.0, 1.0, 1.0)     # mm per output unit, per axis


def _p(w: NetWeights, key):
    return np.asarray(w.params[key], dtype=np.float64)


def check_input_shape(cfg: UNetConfig, dims):
    for axis, d in zip("xyz", dims):
        if d % cfg.divisor:
            raise ValueError(f"input dimension along {axis} ({d}) must be divisible by "
                             f"{cfg.divisor} for depth {cfg.depth}")


def forward_array(w: NetWeights, x: np.ndarray, train: bool = False):
    """Forward pass on a ``(C_in, N, X, Y, Z)`` array; returns ``(out, tape)``."""
    cfg = w.config
    if x.shape[0] != cfg.input_channels:
        raise ValueError(f"expected {cfg.input_channels} input channels, got {x.shape[0]}")
    check_input_shape(cfg, x.shape[2:])
    records, running, skips = [], {}, {}
    h = np.asarray(x, dtype=np.float64)

    def conv_block(name, h):
        z = conv3_forward(h, _p(w, f"{name}.w"))
        y, bn_cache, (mu, s2) = bn_forward(z, _p(w, f"{name}.gamma"), _p(w, f"{name}.beta"),
                                           _p(w, f"{name}.mean"), _p(w, f"{name}.var"), train)
        if train:
            running[f"{name}.mean"] = (1 - BN_MOMENTUM) * _p(w, f"{name}.mean") + BN_MOMENTUM * mu
            running[f"{name}.var"] = (1 - BN_MOMENTUM) * _p(w, f"{name}.var") + BN_MOMENTUM * s2
        records.append(("conv3", name, h, bn_cache, y))
        return np.maximum(y, 0.0)

    for s in range(cfg.depth):
        if s:
            records.append(("pool", f"pool{s}", None, None, None))
            h = pool_forward(h)
        for k in range(cfg.convs_per_stage):
            h = conv_block(f"enc{s}_conv{k}", h)
        skips[s] = h
    for s in reversed(range(cfg.depth - 1)):
        name = f"dec{s}_up"
        records.append(("up", name, h, None, None))
        h = up_forward(h, _p(w, f"{name}.w"), _p(w, f"{name}.b"))
        records.append(("concat", f"dec{s}_cat", s, h.shape[0], None))
        h = np.concatenate([h, skips[s]], axis=0)
        for k in range(cfg.convs_per_stage):
            h = conv_block(f"dec{s}_conv{k}", h)
    records.append(("conv1", "out", h, None, None))
    out = conv1_forward(h, _p(w, "out.w"), _p(w, "out.b"))
    return out, Tape(cfg, train, records, running, x.shape)


def backward_array(w: NetWeights, tape: Tape, dout: np.ndarray):
    """Reverse pass; returns ``(weight_grads, input_grad)``."""
    cfg = w.config
    if tape.config != cfg:
        raise ValueError("tape was recorded with a different network configuration")
    grads = {}
    skip_grads = {}
    d = np.asarray(dout, dtype=np.float64)
    for kind, name, a, b, c in reversed(tape.records):
        if kind == "conv1":
            if d.shape != (cfg.output_channels,) + a.shape[1:]:
                raise ValueError(f"output gradient shape {d.shape} does not match the tape")
            d, grads[f"{name}.w"], grads[f"{name}.b"] = conv1_backward(d, a, _p(w, f"{name}.w"))
        elif kind == "conv3":
            x_in, bn_cache, pre = a, b, c
            stage = name.split("_")[0]
            if stage.startswith("enc") and name.endswith(f"conv{cfg.convs_per_stage - 1}"):
                # this output also fed the decoder through a skip connection
                s = int(stage[3:])
                if s in skip_grads:
                    d = d + skip_grads.pop(s)
            d = d * (pre > 0)
            d, grads[f"{name}.gamma"], grads[f"{name}.beta"] = bn_backward(
                d, bn_cache, _p(w, f"{name}.gamma"))
            d, grads[f"{name}.w"] = conv3_backward(d, x_in, _p(w, f"{name}.w"))
        elif kind == "concat":
            s, n_up = a, b
            skip_grads[s] = d[n_up:]
            d = d[:n_up]
        elif kind == "up":
            d, grads[f"{name}.w"], grads[f"{name}.b"] = up_backward(d, a, _p(w, f"{name}.w"))
        elif kind == "pool":
            d = pool_backward(d)
    return grads, d


def _stack_inputs(F: Volume, Mw: Volume) -> np.ndarray:
    if not F.grid.same_geometry(Mw.grid):
        raise ValueError("fixed and warped moving image must share geometry")
    return np.stack([np.asarray(F.data, dtype=np.float64),
                     np.asarray(Mw.data, dtype=np.float64)])[:, None]


def unet_forward(w: NetWeights, F: Volume, Mw: Volume, mode: str = "eval"):
    """Predict a displacement field (mm) on the grid of ``F``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, tape = forward_array(w, _stack_inputs(F, Mw), train=mode == "train")
    if w.config.output_units == "voxel":
        tape.scale = tuple(float(s) for s in F.grid.spacing_mm)
    u = np.moveaxis(out[:, 0], 0, -1) * np.asarray(tape.scale)
    return DisplacementField(F.grid, u), tape


def unet_backward(w: NetWeights, tape: Tape, dL_du: np.ndarray):
    """Backpropagate ``dL/du`` (shape ``dims + (3,)``) to weights and the two inputs."""
    dL_du = np.asarray(dL_du, dtype=np.float64)
    if dL_du.shape != tuple(tape.input_shape[2:]) + (3,):
        raise ValueError(f"gradient shape {dL_du.shape} does not match tape input "
                         f"{tape.input_shape[2:]}")
    dL_du = dL_du * np.asarray(tape.scale)
    grads, dx = backward_array(w, tape, np.moveaxis(dL_du, -1, 0)[:, None])
    return grads, dx[:, 0]


def with_running_stats(w: NetWeights, tape: Tape) -> NetWeights:
    """Weights with batch-norm running statistics updated from a train-mode tape."""
    new = w.copy()
    for k, v in tape.running.items():
        new.params[k] = v.astype(new.params[k].dtype)
    return new


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(w: NetWeights, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new weights and state."""
    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    new = w.copy()
    for k in w.trainable():
        g = np.asarray(grads.get(k, 0.0), dtype=np.float64)
        p = w.params[k]
        if g.shape and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        g = np.broadcast_to(g, p.shape)
        m[k] = beta1 * m.get(k, 0.0) + (1 - beta1) * g
        v[k] = beta2 * v.get(k, 0.0) + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1 ** t)
        vhat = v[k] / (1 - beta2 ** t)
        new.params[k] = (p.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return new, replace(state, m=m, v=v, t=t)
