"""Small deterministic neural-network kernel.

Networks are described by a :class:`NetworkSpec` (an ordered list of
resolved :class:`LayerSpec` entries) and evaluated with a separate parameter
dictionary, so the same spec can be shared across parameter sets. Tensors are
float64 numpy arrays with an explicit leading batch axis; image-like tensors
use ``(batch, channels, height, width)``.

Parameter names are ``"<layer index>.weight"`` and ``"<layer index>.bias"``.
Weight layouts:

* dense: ``(in_features, out_features)``, ``y = x @ W + b``
* conv2d: ``(out_ch, in_ch, kh, kw)``
* tconv2d: ``(in_ch, out_ch, kh, kw)``, i.e. the weight of the conv2d it is
  the adjoint of
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import kernels

LAYER_KINDS = ("dense", "conv2d", "tconv2d", "tanh", "sigmoid", "softmax", "flatten", "reshape")
PARAMETERIZED = ("dense", "conv2d", "tconv2d")

ParamSet = dict  # name -> np.ndarray


class ShapeError(ValueError):
    """Raised when layer shapes do not compose or an input has the wrong shape."""


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int | None = None  # dense width or output channels
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: str = "same"
    shape: tuple[int, ...] | None = None  # reshape target, or tconv2d output spatial size
    # resolved at build time
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {self.padding!r}")


def dense(out):
    return LayerSpec("dense", out=int(out))


def conv2d(out_channels, kernel=5, stride=1, padding="same"):
    k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    return LayerSpec("conv2d", out=int(out_channels), kernel=k, stride=int(stride), padding=padding)


def tconv2d(out_channels, kernel=5, stride=1, padding="same", output_size=None):
    """Transposed convolution; ``output_size`` pins the spatial output (h, w).

    Without it the output is ``in * stride`` for "same" and
    ``(in - 1) * stride + k`` for "valid".
    """
    k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    size = None if output_size is None else tuple(int(s) for s in output_size)
    return LayerSpec("tconv2d", out=int(out_channels), kernel=k, stride=int(stride),
                     padding=padding, shape=size)


def tanh():
    return LayerSpec("tanh")


def sigmoid():
    return LayerSpec("sigmoid")


def softmax():
    return LayerSpec("softmax")


def flatten():
    return LayerSpec("flatten")


def reshape(shape):
    return LayerSpec("reshape", shape=tuple(int(s) for s in shape))


def conv_output_size(size, k, stride, padding):
    if padding == "same":
        return -(-size // stride)
    if size < k:
        raise ShapeError(f"valid conv: input {size} smaller than kernel {k}")
    return (size - k) // stride + 1


def _same_pad(size, out, k, stride):
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _resolve(layer: LayerSpec, in_shape):
    kind = layer.kind
    if kind == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got shape {in_shape}")
        return replace(layer, in_shape=in_shape, out_shape=(layer.out,))
    if kind in ("conv2d", "tconv2d"):
        if len(in_shape) != 3:
            raise ShapeError(f"{kind} expects (channels, h, w), got shape {in_shape}")
        c, h, w = in_shape
        kh, kw = layer.kernel
        s = layer.stride
        if kind == "conv2d":
            # conv maps (c, h, w) -> (out, ho, wo); padding computed on the input side
            big, small = (h, w), (conv_output_size(h, kh, s, layer.padding),
                                  conv_output_size(w, kw, s, layer.padding))
            out_shape = (layer.out, *small)
        else:
            # tconv is the adjoint of a conv mapping (out, H, W) -> (c, h, w)
            if layer.shape is not None:
                big = layer.shape
            elif layer.padding == "same":
                big = (h * s, w * s)
            else:
                big = ((h - 1) * s + kh, (w - 1) * s + kw)
            small = (h, w)
            for dim_big, dim_small, k in ((big[0], h, kh), (big[1], w, kw)):
                if conv_output_size(dim_big, k, s, layer.padding) != dim_small:
                    raise ShapeError(f"tconv2d output size {big} incompatible with input {in_shape}")
            out_shape = (layer.out, *big)
        if layer.padding == "same":
            pad = (*_same_pad(big[0], small[0], kh, s), *_same_pad(big[1], small[1], kw, s))
        else:
            pad = (0, 0, 0, 0)
        if layer.padding == "valid" and (big[0] < kh or big[1] < kw):
            raise ShapeError(f"{kind}: spatial size {big} smaller than kernel {layer.kernel}")
        return replace(layer, in_shape=in_shape, out_shape=out_shape, pad=pad)
    if kind in ("tanh", "sigmoid"):
        return replace(layer, in_shape=in_shape, out_shape=in_shape)
    if kind == "softmax":
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects a flat input, got shape {in_shape}")
        return replace(layer, in_shape=in_shape, out_shape=in_shape)
    if kind == "flatten":
        return replace(layer, in_shape=in_shape, out_shape=(math.prod(in_shape),))
    if math.prod(layer.shape) != math.prod(in_shape):
        raise ShapeError(f"cannot reshape {in_shape} to {layer.shape}")
    return replace(layer, in_shape=in_shape, out_shape=layer.shape)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...] = field(default=())

    @classmethod
    def build(cls, input_shape, layers):
        """Resolve every layer's shapes against ``input_shape``; raises ShapeError."""
        shape = tuple(int(s) for s in input_shape)
        start = shape
        resolved = []
        for layer in layers:
            layer = _resolve(layer, shape)
            resolved.append(layer)
            shape = layer.out_shape
        return cls(tuple(resolved), start, shape)

    def param_shapes(self):
        shapes = {}
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                shapes[f"{i}.weight"] = (layer.in_shape[0], layer.out)
                shapes[f"{i}.bias"] = (layer.out,)
            elif layer.kind == "conv2d":
                shapes[f"{i}.weight"] = (layer.out, layer.in_shape[0], *layer.kernel)
                shapes[f"{i}.bias"] = (layer.out,)
            elif layer.kind == "tconv2d":
                shapes[f"{i}.weight"] = (layer.in_shape[0], layer.out, *layer.kernel)
                shapes[f"{i}.bias"] = (layer.out,)
        return shapes

    def num_params(self):
        return sum(math.prod(s) for s in self.param_shapes().values())


def _fans(layer):
    if layer.kind == "dense":
        return layer.in_shape[0], layer.out
    kk = layer.kernel[0] * layer.kernel[1]
    return layer.in_shape[0] * kk, layer.out * kk


def init_params(net: NetworkSpec, seed) -> ParamSet:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(net.layers):
        if layer.kind not in PARAMETERIZED:
            continue
        fan_in, fan_out = _fans(layer)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        wshape = net.param_shapes()[f"{i}.weight"]
        params[f"{i}.weight"] = rng.uniform(-limit, limit, size=wshape)
        params[f"{i}.bias"] = np.zeros(layer.out)
    return params


def check_params(net: NetworkSpec, params: ParamSet):
    shapes = net.param_shapes()
    if set(shapes) != set(params):
        raise ShapeError(f"parameter names {sorted(params)} do not match network {sorted(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def _pad(x, pad):
    t, b, l, r = pad
    if not any(pad):
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def _crop(x, pad):
    t, b, l, r = pad
    return np.ascontiguousarray(x[:, :, t:x.shape[2] - b, l:x.shape[3] - r])


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _layer_forward(layer, i, params, x):
    kind = layer.kind
    if kind == "dense":
        return x @ params[f"{i}.weight"] + params[f"{i}.bias"]
    if kind == "conv2d":
        y = kernels.conv2d_forward(_pad(x, layer.pad), params[f"{i}.weight"], layer.stride)
        return y + params[f"{i}.bias"][None, :, None, None]
    if kind == "tconv2d":
        _, h, w = layer.out_shape
        t, b, l, r = layer.pad
        full = kernels.conv2d_backward_input(
            np.ascontiguousarray(x), params[f"{i}.weight"], layer.stride, h + t + b, w + l + r)
        return _crop(full, layer.pad) + params[f"{i}.bias"][None, :, None, None]
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "softmax":
        return _softmax(x)
    return x.reshape((x.shape[0], *layer.out_shape))


def forward(net: NetworkSpec, params: ParamSet, x):
    """Evaluate ``net``; returns ``(output, trace)``.

    ``trace`` holds the input of every layer followed by the final output and
    is what :func:`backward` consumes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    trace = [x]
    for i, layer in enumerate(net.layers):
        x = _layer_forward(layer, i, params, x)
        trace.append(x)
    return x, trace


def backward(net: NetworkSpec, params: ParamSet, trace, output_grad):
    """Reverse-mode pass; returns ``(input_grad, param_grads)``."""
    if len(trace) != len(net.layers) + 1:
        raise ShapeError("trace does not match network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} does not match output {trace[-1].shape}")
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x, y = trace[i], trace[i + 1]
        kind = layer.kind
        if kind == "dense":
            grads[f"{i}.weight"] = x.T @ g
            grads[f"{i}.bias"] = g.sum(axis=0)
            g = g @ params[f"{i}.weight"].T
        elif kind == "conv2d":
            xp = _pad(x, layer.pad)
            g = np.ascontiguousarray(g)
            w = params[f"{i}.weight"]
            grads[f"{i}.weight"] = kernels.conv2d_backward_weight(xp, g, layer.stride, *layer.kernel)
            grads[f"{i}.bias"] = g.sum(axis=(0, 2, 3))
            g = _crop(kernels.conv2d_backward_input(g, w, layer.stride, *xp.shape[2:]), layer.pad)
        elif kind == "tconv2d":
            gp = _pad(g, layer.pad)
            w = params[f"{i}.weight"]
            xc = np.ascontiguousarray(x)
            grads[f"{i}.weight"] = kernels.conv2d_backward_weight(gp, xc, layer.stride, *layer.kernel)
            grads[f"{i}.bias"] = g.sum(axis=(0, 2, 3))
            g = kernels.conv2d_forward(gp, w, layer.stride)
        elif kind == "tanh":
            g = g * (1.0 - y * y)
        elif kind == "sigmoid":
            g = g * y * (1.0 - y)
        elif kind == "softmax":
            g = y * (g - (g * y).sum(axis=1, keepdims=True))
        else:
            g = g.reshape(x.shape)
    return g, grads


def sgd_update(params: ParamSet, grads: ParamSet, lr) -> ParamSet:
    """Return a new ParamSet with ``p - lr * g`` for every entry."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if set(params) != set(grads):
        raise ShapeError("gradient names do not match parameters")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        with np.errstate(over="ignore", invalid="ignore"):
            new = p - lr * g
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"update overflowed for {name}")
        out[name] = new
    return out


def zero_grads(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass(frozen=True)
class Model:
    """A network spec paired with its parameters."""

    spec: NetworkSpec
    params: ParamSet

    def __call__(self, x):
        return forward(self.spec, self.params, x)[0]


def finite_diff_check(net: NetworkSpec, params: ParamSet, x, tol=1e-4, step=1e-5,
                      grad_fn: Callable | None = None):
    """Compare backward gradients of ``sum(forward(x))`` against central differences.

    Checks every parameter entry and every input entry. ``grad_fn`` replaces
    :func:`backward` (used to inject faulty gradients). Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)`` so near-zero entries are judged
    absolutely at that floor.
    """
    x = np.asarray(x, dtype=np.float64)
    out, trace = forward(net, params, x)
    grad_fn = grad_fn or backward
    gin, grads = grad_fn(net, params, trace, np.ones_like(out))

    def head(p, inp):
        return forward(net, p, inp)[0].sum()

    worst = 0.0

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    for name, value in params.items():
        flat = value.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = head(params, x)
            flat[j] = orig - step
            down = head(params, x)
            flat[j] = orig
            worst = max(worst, rel(gflat[j], (up - down) / (2 * step)))
    xf = x.reshape(-1)
    gx = gin.reshape(-1)
    for j in range(xf.size):
        orig = xf[j]
        xf[j] = orig + step
        up = head(params, x)
        xf[j] = orig - step
        down = head(params, x)
        xf[j] = orig
        worst = max(worst, rel(gx[j], (up - down) / (2 * step)))
    return {"max_rel_err": worst, "pass": worst < tol}
