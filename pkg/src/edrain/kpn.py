"""UNet-style kernel prediction network and the end-to-end derain operator.

Architecture (``levels`` resolution levels, ``base_channels`` doubling per level):

* encoder level i: two 3x3 conv + ReLU blocks, then 2x2 average pooling
  (except after the deepest level);
* decoder level i: nearest 2x upsample, concatenate ``[upsampled, skip_i]``,
  two 3x3 conv + ReLU blocks;
* head: 1x1 conv to K*K channels, one kernel per pixel;
* the kernel field filters the input at every dilation rate and a 3x3
  fusion conv combines the results.

The network starts as (approximately) the identity map: head weights are
tiny, the head bias is the delta kernel, and the fusion layer averages the
scales. That makes the untrained model a pass-through, which is both a
stable training start and an easy invariant to test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidArgument
from .filtering import (
    DEFAULT_DILATIONS,
    FusionParams,
    fuse_scales,
    fuse_scales_backward,
    pixel_wise_dilated_filter,
    pixel_wise_dilated_filter_backward,
    softmax_kernels,
    softmax_kernels_backward,
    validate_dilations,
)

# He-initialised head weights multiplied by this keep the initial kernels
# within ~1e-3 of the delta kernel.
HEAD_INIT_SCALE = 1e-3
# Softmax mode cannot reach an exact delta; the centre tap starts at this probability.
SOFTMAX_CENTRE_PROB = 0.99


@dataclass(frozen=True)
class KpnConfig:
    levels: int = 3
    base_channels: int = 32
    kernel_width: int = 5
    dilations: tuple = DEFAULT_DILATIONS
    input_channels: int = 3
    normalize_kernels: bool = False

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidArgument(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise InvalidArgument(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise InvalidArgument(f"kernel_width must be odd and positive, got {self.kernel_width}")
        if self.input_channels < 1:
            raise InvalidArgument(f"input_channels must be >= 1, got {self.input_channels}")
        object.__setattr__(self, "dilations", tuple(sorted(validate_dilations(self.dilations))))

    @property
    def multiple(self):
        """Spatial dims must be divisible by this."""
        return 2 ** (self.levels - 1)

    def channels(self, level):
        return self.base_channels * 2**level

    def layer_shapes(self):
        """Ordered ``name -> (C_out, C_in, k)`` for every conv layer."""
        shapes = {}
        c_prev = self.input_channels
        for i in range(self.levels):
            ch = self.channels(i)
            shapes[f"enc{i}.conv1"] = (ch, c_prev, 3)
            shapes[f"enc{i}.conv2"] = (ch, ch, 3)
            c_prev = ch
        for i in reversed(range(self.levels - 1)):
            ch = self.channels(i)
            shapes[f"dec{i}.conv1"] = (ch, self.channels(i + 1) + ch, 3)
            shapes[f"dec{i}.conv2"] = (ch, ch, 3)
        shapes["head"] = (self.kernel_width**2, self.base_channels, 1)
        c = self.input_channels
        shapes["fusion"] = (c, len(self.dilations) * c, 3)
        return shapes

    def parameter_count(self):
        return sum(co * ci * k * k + co for co, ci, k in self.layer_shapes().values())

    def to_dict(self):
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "kernel_width": self.kernel_width,
            "dilations": list(self.dilations),
            "input_channels": self.input_channels,
            "normalize_kernels": self.normalize_kernels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dilations"] = tuple(d["dilations"])
        return cls(**d)


@dataclass
class KpnParams:
    config: KpnConfig
    layers: dict = field(default_factory=dict)  # name -> ConvLayerParams

    @property
    def fusion(self):
        return FusionParams(self.layers["fusion"], len(self.config.dilations))

    @property
    def dtype(self):
        return self.layers["head"].weights.dtype

    def arrays(self):
        """Flat ``'<layer>.weight' / '<layer>.bias' -> ndarray`` view (no copies)."""
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.weight"] = layer.weights
            out[f"{name}.bias"] = layer.bias
        return out

    def with_arrays(self, arrays):
        layers = {}
        for name, layer in self.layers.items():
            layers[name] = T.ConvLayerParams(
                arrays[f"{name}.weight"], arrays[f"{name}.bias"], layer.stride, layer.padding
            )
        return KpnParams(self.config, layers)

    def astype(self, dtype):
        return self.with_arrays({k: v.astype(dtype) for k, v in self.arrays().items()})

    def parameter_count(self):
        return sum(a.size for a in self.arrays().values())


def _identity_head_bias(config, dtype):
    k2 = config.kernel_width**2
    bias = np.zeros(k2, dtype=dtype)
    centre = k2 // 2
    if config.normalize_kernels:
        bias[centre] = math.log(SOFTMAX_CENTRE_PROB * (k2 - 1) / (1.0 - SOFTMAX_CENTRE_PROB)) if k2 > 1 else 0.0
    else:
        bias[centre] = 1.0
    return bias


def kpn_init(config, seed, dtype=np.float64):
    """He-normal weights, zero biases; identity-start head and fusion."""
    rng = np.random.Generator(np.random.Philox(seed))
    layers = {}
    for name, (co, ci, k) in config.layer_shapes().items():
        if name == "fusion":
            layers[name] = FusionParams.averaging(len(config.dilations), config.input_channels, dtype).conv
            continue
        std = math.sqrt(2.0 / (ci * k * k))
        w = rng.standard_normal((co, ci, k, k)) * std
        if name == "head":
            w *= HEAD_INIT_SCALE
            b = _identity_head_bias(config, dtype)
        else:
            b = np.zeros(co, dtype=dtype)
        layers[name] = T.ConvLayerParams(w.astype(dtype), b, stride=1, padding=k // 2)
    return KpnParams(config, layers)


def _check_input(config, image):
    if image.ndim != 4:
        raise InvalidArgument(f"expected NCHW image, got shape {image.shape}")
    if image.shape[1] != config.input_channels:
        raise InvalidArgument(f"image has C={image.shape[1]} channels, network expects {config.input_channels}")
    m = config.multiple
    h, w = image.shape[2:]
    if h % m or w % m:
        raise InvalidArgument(f"image H={h}, W={w} must both be multiples of {m} (2^(levels-1))")


def _conv_relu(x, layer, cache, name):
    pre = T.conv2d_forward(x, layer)
    cache[name] = (x, pre)
    return T.relu_forward(pre)


def _conv_relu_backward(layer, cache, name, grad, grads):
    x, pre = cache[name]
    g = T.relu_backward(pre, grad)
    gx, gw, gb = T.conv2d_backward(x, layer, g)
    grads[f"{name}.weight"] = gw
    grads[f"{name}.bias"] = gb
    return gx


def _kpn_forward_cached(params, image):
    config = params.config
    _check_input(config, image)
    L = params.layers
    cache = {}
    x = image
    skips = []
    for i in range(config.levels):
        x = _conv_relu(x, L[f"enc{i}.conv1"], cache, f"enc{i}.conv1")
        x = _conv_relu(x, L[f"enc{i}.conv2"], cache, f"enc{i}.conv2")
        if i < config.levels - 1:
            skips.append(x)
            cache[f"pool{i}"] = x.shape
            x = T.avgpool2x2_forward(x)
    for i in reversed(range(config.levels - 1)):
        up = T.upsample_nearest2x_forward(x)
        cache[f"cat{i}"] = (up.shape[1], skips[i].shape[1])
        x = T.concat_channels_forward([up, skips[i]])
        x = _conv_relu(x, L[f"dec{i}.conv1"], cache, f"dec{i}.conv1")
        x = _conv_relu(x, L[f"dec{i}.conv2"], cache, f"dec{i}.conv2")
    cache["head_in"] = x
    logits = T.conv2d_forward(x, L["head"])
    kernels = softmax_kernels(logits) if config.normalize_kernels else logits
    return kernels, cache


def _kpn_backward_cached(params, cache, grad_kernels):
    config = params.config
    L = params.layers
    grads = {}
    if config.normalize_kernels:
        grad_kernels = softmax_kernels_backward(cache["kernels"], grad_kernels)
    g, gw, gb = T.conv2d_backward(cache["head_in"], L["head"], grad_kernels)
    grads["head.weight"], grads["head.bias"] = gw, gb
    skip_grads = {}
    for i in range(config.levels - 1):
        g = _conv_relu_backward(L[f"dec{i}.conv2"], cache, f"dec{i}.conv2", g, grads)
        g = _conv_relu_backward(L[f"dec{i}.conv1"], cache, f"dec{i}.conv1", g, grads)
        g_up, skip_grads[i] = T.concat_channels_backward(cache[f"cat{i}"], g)
        g = T.upsample_nearest2x_backward(g_up)
    for i in reversed(range(config.levels)):
        if i < config.levels - 1:
            g = T.avgpool2x2_backward(cache[f"pool{i}"], g) + skip_grads[i]
        g = _conv_relu_backward(L[f"enc{i}.conv2"], cache, f"enc{i}.conv2", g, grads)
        g = _conv_relu_backward(L[f"enc{i}.conv1"], cache, f"enc{i}.conv1", g, grads)
    return grads


def kpn_forward(params, image):
    """Predict the (N, K*K, H, W) kernel field for ``image``."""
    kernels, _ = _kpn_forward_cached(params, image)
    return kernels


def derain_forward(params, image):
    """Run the full pipeline; returns ``(output, cache)`` for ``derain_backward``."""
    kernels, cache = _kpn_forward_cached(params, image)
    cache["kernels"] = kernels
    scales = [pixel_wise_dilated_filter(image, kernels, l) for l in params.config.dilations]
    cache["scales"] = scales
    cache["image"] = image
    return fuse_scales(scales, params.fusion), cache


def derain_backward(params, cache, grad_output):
    """Parameter gradients (dict keyed like ``params.arrays()``) from a forward cache."""
    image, kernels = cache["image"], cache["kernels"]
    scale_grads, gw, gb = fuse_scales_backward(cache["scales"], params.fusion, grad_output)
    grad_kernels = np.zeros(kernels.shape, dtype=np.result_type(kernels, grad_output))
    for l, g in zip(params.config.dilations, scale_grads):
        _, gk = pixel_wise_dilated_filter_backward(image, kernels, l, g)
        grad_kernels += gk
    grads = _kpn_backward_cached(params, cache, grad_kernels)
    grads["fusion.weight"], grads["fusion.bias"] = gw, gb
    return {k: grads[k] for k in params.arrays()}


def derain(params, image):
    """Derained image. Not clamped; clamp at export time."""
    out, _ = derain_forward(params, image)
    return out


def kpn_backward(params, image, grad_output):
    """Exact adjoint of ``derain`` with respect to every parameter."""
    out, cache = derain_forward(params, image)
    if grad_output.shape != out.shape:
        raise InvalidArgument(f"grad_output shape {grad_output.shape} != output shape {out.shape}")
    return derain_backward(params, cache, grad_output)

