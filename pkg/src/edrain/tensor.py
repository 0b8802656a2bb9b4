"""Dense-array layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every forward
function here has a matching ``*_backward`` that returns exact adjoints, so
each gradient can be checked on its own against finite differences. Ops keep
the dtype of their inputs: float64 for gradient checks, float32 for speed.

Set ``EDRAIN_DEBUG=1`` to make every op assert that its outputs are finite.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

DEBUG = os.environ.get("EDRAIN_DEBUG", "") not in ("", "0")


def _check_finite(name, *arrays):
    if DEBUG:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{name} produced non-finite values")


def _require_4d(name, x):
    if x.ndim != 4:
        raise InvalidArgument(f"{name}: expected NCHW tensor, got shape {x.shape}")


@dataclass
class ConvLayerParams:
    weights: np.ndarray  # (C_out, C_in, k_h, k_w)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise InvalidArgument(f"conv weights must be 4-D, got shape {self.weights.shape}")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidArgument(f"conv kernel must have odd size, got {kh}x{kw}")
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidArgument(
                f"bias shape {self.bias.shape} does not match C_out={self.weights.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise InvalidArgument(f"stride must be >= 1 and padding >= 0 (got {self.stride}, {self.padding})")

    @property
    def c_out(self):
        return self.weights.shape[0]

    @property
    def c_in(self):
        return self.weights.shape[1]

    def copy(self):
        return ConvLayerParams(self.weights.copy(), self.bias.copy(), self.stride, self.padding)


def _conv_geometry(x, params):
    _require_4d("conv2d", x)
    n, c, h, w = x.shape
    if c != params.c_in:
        raise InvalidArgument(f"conv2d: input channel dimension C={c} does not match C_in={params.c_in}")
    kh, kw = params.weights.shape[2:]
    p, s = params.padding, params.stride
    if h + 2 * p < kh:
        raise InvalidArgument(f"conv2d: height H={h} with padding {p} is smaller than kernel height {kh}")
    if w + 2 * p < kw:
        raise InvalidArgument(f"conv2d: width W={w} with padding {p} is smaller than kernel width {kw}")
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    return n, c, h, w, kh, kw, ho, wo


def _flat_padded(x, padding):
    """NCHW -> zero-padded NHWC flattened to (N*Hp*Wp, C) rows."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    return xp.reshape(-1, c)


# Stride-1 convolution as a sum of kh*kw shifted matmuls over the flattened
# padded image. Row q of the flat array maps to (n, y, x) on the padded grid;
# tap (i, j) reads row q + i*Wp + j, a contiguous slice, so no im2col buffer
# is built. Rows whose (y, x) falls outside the valid output are discarded.


def conv2d_forward(x, params):
    """Cross-correlation with zero padding, matching the usual deep-learning conv."""
    n, c, h, w, kh, kw, ho, wo = _conv_geometry(x, params)
    p, s = params.padding, params.stride
    hp, wp = h + 2 * p, w + 2 * p
    xf = _flat_padded(x, p)
    span = xf.shape[0] - ((kh - 1) * wp + (kw - 1))
    wt = np.ascontiguousarray(params.weights.transpose(2, 3, 1, 0))  # (kh, kw, C_in, C_out)
    out = np.zeros((xf.shape[0], params.c_out), dtype=np.result_type(x, params.weights))
    acc = out[:span]
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc += xf[off : off + span] @ wt[i, j]
    out = out.reshape(n, hp, wp, params.c_out)
    out = out[:, : hp - kh + 1 : s, : wp - kw + 1 : s, :]
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    _check_finite("conv2d_forward", out)
    return out


def conv2d_backward(x, params, grad_output):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    n, c, h, w, kh, kw, ho, wo = _conv_geometry(x, params)
    expected = (n, params.c_out, ho, wo)
    if grad_output.shape != expected:
        raise InvalidArgument(f"conv2d_backward: grad_output shape {grad_output.shape} != {expected}")
    p, s = params.padding, params.stride
    hp, wp = h + 2 * p, w + 2 * p
    dtype = np.result_type(x, params.weights, grad_output)
    xf = _flat_padded(x, p)
    span = xf.shape[0] - ((kh - 1) * wp + (kw - 1))

    gp = np.zeros((n, hp, wp, params.c_out), dtype=dtype)
    gp[:, : hp - kh + 1 : s, : wp - kw + 1 : s, :] = grad_output.transpose(0, 2, 3, 1)
    gf = gp.reshape(-1, params.c_out)[:span]

    wt_t = np.ascontiguousarray(params.weights.transpose(2, 3, 0, 1))  # (kh, kw, C_out, C_in)
    grad_wt = np.empty((kh, kw, c, params.c_out), dtype=dtype)
    dxf = np.zeros((xf.shape[0], c), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            grad_wt[i, j] = xf[off : off + span].T @ gf
            dxf[off : off + span] += gf @ wt_t[i, j]
    grad_x = dxf.reshape(n, hp, wp, c)[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2)
    grad_x = np.ascontiguousarray(grad_x)
    grad_w = np.ascontiguousarray(grad_wt.transpose(3, 2, 0, 1))
    grad_b = grad_output.sum(axis=(0, 2, 3))
    _check_finite("conv2d_backward", grad_x, grad_w, grad_b)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_output):
    if grad_output.shape != x.shape:
        raise InvalidArgument(f"relu_backward: grad_output shape {grad_output.shape} != {x.shape}")
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype, copy=False)


def avgpool2x2_forward(x):
    _require_4d("avgpool2x2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidArgument(f"avgpool2x2: spatial dims must be even, got H={h}, W={w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2x2_backward(x_shape, grad_output):
    n, c, h, w = x_shape
    if grad_output.shape != (n, c, h // 2, w // 2):
        raise InvalidArgument(f"avgpool2x2_backward: grad_output shape {grad_output.shape} does not match input {x_shape}")
    g = grad_output * 0.25
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def upsample_nearest2x_forward(x):
    _require_4d("upsample_nearest2x", x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2x_backward(grad_output):
    n, c, h, w = grad_output.shape
    if h % 2 or w % 2:
        raise InvalidArgument(f"upsample_nearest2x_backward: odd grad_output dims H={h}, W={w}")
    return grad_output.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels_forward(tensors):
    if not tensors:
        raise InvalidArgument("concat_channels: need at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        _require_4d("concat_channels", t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise InvalidArgument(f"concat_channels: shape {t.shape} incompatible with {ref} (N, H, W must match)")
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(channel_counts, grad_output):
    if sum(channel_counts) != grad_output.shape[1]:
        raise InvalidArgument(
            f"concat_channels_backward: channel counts {channel_counts} do not sum to C={grad_output.shape[1]}"
        )
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_output, splits, axis=1)]


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    ``params`` and ``grads`` are dicts of arrays keyed alike. Inputs are not
    modified.
    """
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise InvalidArgument("adam_step: params, grads and state must share the same keys")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise InvalidArgument(f"adam_step: shape mismatch for '{k}': param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return new_params, new_state
