"""Layer primitives with exact forward and backward passes.

Activations are ``channels x frames`` arrays.  Convolution weights are
``out_ch x in_ch x taps``.  Every backward function is the exact adjoint of
its forward function, so the dtype of the inputs (float32 for training,
float64 for gradient checks) carries through.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

# Above this many taps, convolutions go through the FFT.
FFT_MIN_TAPS = 16


class LayerKind(str, enum.Enum):
    CONV = "conv"
    TCONV = "tconv"
    MAXPOOL = "maxpool"
    TANH = "tanh"
    HEAD = "conv1x1_head"


PARAMETRIC = (LayerKind.CONV, LayerKind.TCONV, LayerKind.HEAD)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_ch: int
    out_ch: int
    k: int = 1
    dilation: int = 1
    stride_or_pool: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        for name in ("in_ch", "out_ch", "k", "dilation", "stride_or_pool"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{self.kind.value} layer: {name} must be >= 1")
        if self.kind in (LayerKind.TANH, LayerKind.MAXPOOL) and self.in_ch != self.out_ch:
            raise ValueError(f"{self.kind.value} layer must keep the channel count")
        if self.kind is LayerKind.HEAD and self.k != 1:
            raise ValueError("the 1x1 head must have k=1")

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_ch, self.in_ch, self.k)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "k": self.k,
            "dilation": self.dilation,
            "stride_or_pool": self.stride_or_pool,
        }


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered layer stack ending in exactly one 1x1 head."""

    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers or layers[-1].kind is not LayerKind.HEAD:
            raise ValueError("network must end with a conv1x1_head layer")
        if sum(l.kind is LayerKind.HEAD for l in layers) != 1:
            raise ValueError("network must contain exactly one conv1x1_head layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_ch != b.in_ch:
                raise ValueError(f"channel chain broken at layer {i + 1}: {a.out_ch} -> {b.in_ch}")

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_ch(self) -> int:
        return self.layers[-1].out_ch

    @property
    def pad_multiple(self) -> int:
        """Input lengths divisible by this pass through the pooling stages exactly."""
        return math.prod(l.stride_or_pool for l in self.layers if l.kind is LayerKind.MAXPOOL)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            if layer.kind in PARAMETRIC:
                shapes[f"layer{i:02d}.weight"] = layer.weight_shape
                shapes[f"layer{i:02d}.bias"] = (layer.out_ch,)
        return shapes

    def n_parameters(self) -> int:
        return sum(math.prod(s) for s in self.parameter_shapes().values())

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]))


# --------------------------------------------------------------------------
# dilated convolution with centered zero padding


def same_padding(k: int, dilation: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the length; extra goes right for even k."""
    extent = (k - 1) * dilation
    return extent // 2, extent - extent // 2


def _check_conv(w, x):
    if w.ndim != 3 or x.ndim != 2:
        raise ValueError(f"expected 3-D weights and 2-D input, got {w.shape} and {x.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"channel mismatch: layer expects {w.shape[1]} input channels, got {x.shape[0]}")


def _inflate(w, dilation):
    o, c, k = w.shape
    out = np.zeros((o, c, (k - 1) * dilation + 1), dtype=w.dtype)
    out[:, :, ::dilation] = w
    return out


def conv1d_forward(w, b, x, dilation: int = 1) -> np.ndarray:
    """Length-preserving dilated convolution.

    ``y[o, t] = b[o] + sum_{c,j} w[o, c, j] * xpad[c, t + j * dilation]``
    """
    _check_conv(w, x)
    o, c, k = w.shape
    n = x.shape[1]
    left, right = same_padding(k, dilation)
    xp = np.pad(x, ((0, 0), (left, right)))
    dtype = np.result_type(w, x)
    if k > FFT_MIN_TAPS:
        return _conv_fft_forward(w, xp, n, dilation).astype(dtype) + b[:, None]
    y = np.empty((o, n), dtype=dtype)
    y[...] = b[:, None]
    for j in range(k):
        y += w[:, :, j] @ xp[:, j * dilation : j * dilation + n]
    return y


def conv1d_backward(w, x, dy, dilation: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dw, db)`` for :func:`conv1d_forward`."""
    _check_conv(w, x)
    o, c, k = w.shape
    n = x.shape[1]
    if dy.shape != (o, n):
        raise ValueError(f"upstream gradient shape {dy.shape} != output shape {(o, n)}")
    left, right = same_padding(k, dilation)
    xp = np.pad(x, ((0, 0), (left, right)))
    db = dy.sum(axis=1)
    if k > FFT_MIN_TAPS:
        dxp, dw = _conv_fft_backward(w, xp, dy, dilation)
        return dxp[:, left : left + n].astype(x.dtype), dw.astype(w.dtype), db
    dxp = np.zeros(xp.shape, dtype=np.result_type(w, dy))
    dw = np.empty_like(w)
    for j in range(k):
        s = slice(j * dilation, j * dilation + n)
        dw[:, :, j] = dy @ xp[:, s].T
        dxp[:, s] += w[:, :, j].T @ dy
    return dxp[:, left : left + n], dw, db


def _fft_len(xp, w, dilation):
    return scipy.fft.next_fast_len(xp.shape[1] + (w.shape[2] - 1) * dilation, real=True)


def _conv_fft_forward(w, xp, n, dilation):
    size = _fft_len(xp, w, dilation)
    xf = scipy.fft.rfft(xp, size, axis=1)
    wf = scipy.fft.rfft(_inflate(w, dilation), size, axis=2)
    yf = np.einsum("cf,ocf->of", xf, wf.conj())
    return scipy.fft.irfft(yf, size, axis=1)[:, :n]


def _conv_fft_backward(w, xp, dy, dilation):
    size = _fft_len(xp, w, dilation)
    extent = (w.shape[2] - 1) * dilation + 1
    xf = scipy.fft.rfft(xp, size, axis=1)
    gf = scipy.fft.rfft(dy, size, axis=1)
    wf = scipy.fft.rfft(_inflate(w, dilation), size, axis=2)
    dwe = scipy.fft.irfft(np.einsum("cf,of->ocf", xf, gf.conj()), size, axis=2)[:, :, :extent]
    dxp = scipy.fft.irfft(np.einsum("of,ocf->cf", gf, wf), size, axis=1)[:, : xp.shape[1]]
    return dxp, dwe[:, :, ::dilation]


# --------------------------------------------------------------------------
# tanh


def tanh_forward(x) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y, dy) -> np.ndarray:
    """Backward pass given the forward *output* ``y``."""
    return dy * (1 - y * y)


# --------------------------------------------------------------------------
# max pooling


def maxpool_forward(x, pool: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled array and the absolute frame index of each maximum
    (ties go to the earliest frame).  Trailing frames that do not fill a
    window are dropped.
    """
    c, n = x.shape
    if n < pool:
        raise ValueError(f"cannot pool {n} frames by {pool}")
    m = n // pool
    windows = x[:, : m * pool].reshape(c, m, pool)
    local = windows.argmax(axis=2)
    argmax = local + pool * np.arange(m)[None, :]
    return np.take_along_axis(windows, local[:, :, None], axis=2)[:, :, 0], argmax


def maxpool_backward(argmax, dy, n_frames: int) -> np.ndarray:
    if argmax.shape != dy.shape:
        raise ValueError(f"index map shape {argmax.shape} does not match gradient shape {dy.shape}")
    dx = np.zeros((dy.shape[0], n_frames), dtype=dy.dtype)
    np.put_along_axis(dx, argmax, dy, axis=1)
    return dx


# --------------------------------------------------------------------------
# transposed convolution


def tconv_output_length(n_x: int, stride: int, n_w: int) -> int:
    return stride * (n_x - 1) + n_w


def tconv1d_forward(w, b, x, stride: int) -> np.ndarray:
    """Transposed convolution: input frame ``i`` writes ``w`` at offset ``stride * i``."""
    _check_conv(w, x)
    o, c, n_w = w.shape
    n_x = x.shape[1]
    span = stride * (n_x - 1) + 1
    y = np.empty((o, tconv_output_length(n_x, stride, n_w)), dtype=np.result_type(w, x))
    y[...] = b[:, None]
    for j in range(n_w):
        y[:, j : j + span : stride] += w[:, :, j] @ x
    return y


def tconv1d_backward(w, x, dy, stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dw, db)``; ``dx`` is the stride-``s`` convolution of ``dy`` with ``w``."""
    _check_conv(w, x)
    o, c, n_w = w.shape
    n_x = x.shape[1]
    if dy.shape != (o, tconv_output_length(n_x, stride, n_w)):
        raise ValueError(f"upstream gradient shape {dy.shape} does not match tconv output")
    span = stride * (n_x - 1) + 1
    dx = np.zeros(x.shape, dtype=np.result_type(w, dy))
    dw = np.empty_like(w)
    for j in range(n_w):
        g = dy[:, j : j + span : stride]
        dx += w[:, :, j].T @ g
        dw[:, :, j] = g @ x.T
    return dx, dw, dy.sum(axis=1)


# --------------------------------------------------------------------------
# parameters, optimizer, receptive field


def init_parameters(spec: NetworkSpec, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases, in layer order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            out_ch, in_ch, k = shape
            limit = math.sqrt(6.0 / (in_ch * k + out_ch * k))
            params[name] = rng.uniform(-limit, limit, shape).astype(dtype)
    return params


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr: float, l2: float = 0.0) -> None:
    """One bias-corrected Adam update, in place; ``l2 * param`` is added to each gradient."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("parameters, gradients and optimizer state must share names")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if l2:
            g = g + l2 * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def receptive_field(spec: NetworkSpec) -> int:
    """Span of input frames that can reach one output frame.

    Exact for convolution stacks; for pooling and transposed-convolution
    stages it is the widest span over output positions.
    """
    rf, jump = 1.0, 1.0
    for layer in spec.layers:
        if layer.kind is LayerKind.CONV:
            rf += (layer.k - 1) * layer.dilation * jump
        elif layer.kind is LayerKind.MAXPOOL:
            rf += (layer.stride_or_pool - 1) * jump
            jump *= layer.stride_or_pool
        elif layer.kind is LayerKind.TCONV:
            rf += (math.ceil(layer.k / layer.stride_or_pool) - 1) * jump
            jump /= layer.stride_or_pool
    return int(round(rf))
