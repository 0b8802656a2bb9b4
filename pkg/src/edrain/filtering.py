"""Pixel-wise (dilated) filtering and multi-scale fusion.

Every output pixel is a weighted sum of its neighbours, with weights taken
from that pixel's own K x K kernel::

    out[n, c, y, x] = sum_{dy, dx} kern[n, (dy, dx), y, x] * img[n, c, y + l*dy, x + l*dx]

with offsets ``dy, dx`` in ``-(K-1)/2 .. (K-1)/2`` and reads outside the image
treated as zero. One kernel field is shared by all colour channels, and the
same field serves every dilation rate ``l``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .tensor import ConvLayerParams, concat_channels_backward, concat_channels_forward, conv2d_backward, conv2d_forward

DEFAULT_DILATIONS = (1, 2, 3, 4)
BAND_PIXELS = 4096


def kernel_width(kernels):
    """Infer K from a (N, K*K, H, W) kernel field."""
    k2 = kernels.shape[1]
    k = math.isqrt(k2)
    if k * k != k2 or k % 2 == 0:
        raise InvalidArgument(f"kernel field channel dimension {k2} is not the square of an odd width")
    return k


def validate_dilations(dilations):
    dilations = tuple(int(d) for d in dilations)
    if not dilations:
        raise InvalidArgument("at least one dilation factor is required")
    if any(d < 1 for d in dilations):
        raise InvalidArgument(f"dilation factors must be positive, got {dilations}")
    if len(set(dilations)) != len(dilations):
        raise InvalidArgument(f"dilation factors must be distinct, got {dilations}")
    return dilations


def _check_pair(image, kernels):
    if image.ndim != 4 or kernels.ndim != 4:
        raise InvalidArgument(f"expected NCHW image and kernel field, got {image.shape} and {kernels.shape}")
    if image.shape[0] != kernels.shape[0]:
        raise InvalidArgument(f"batch size mismatch: image N={image.shape[0]}, kernels N={kernels.shape[0]}")
    if image.shape[2:] != kernels.shape[2:]:
        raise InvalidArgument(
            f"spatial dims mismatch: image {image.shape[2:]} vs kernel field {kernels.shape[2:]}"
        )
    return kernel_width(kernels)


def pixel_wise_dilated_filter(image, kernels, l):
    if l < 1:
        raise InvalidArgument(f"dilation factor must be >= 1, got {l}")
    k = _check_pair(image, kernels)
    n, c, h, w = image.shape
    r = l * (k // 2)
    padded = np.pad(image, ((0, 0), (0, 0), (r, r), (r, r)))
    dtype = np.result_type(image, kernels)
    out = np.zeros(image.shape, dtype=dtype)
    # work in row bands of a fixed pixel budget so the buffers stay in cache
    # and the cost grows linearly with image area
    rows = max(1, BAND_PIXELS // (n * w))
    term = np.empty((n, c, min(rows, h), w), dtype=dtype)
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        band, t = out[:, :, y0:y1], term[:, :, : y1 - y0]
        for ty in range(k):
            for tx in range(k):
                oy, ox = ty * l + y0, tx * l
                np.multiply(kernels[:, ty * k + tx, None, y0:y1], padded[:, :, oy : oy + y1 - y0, ox : ox + w], out=t)
                band += t
    return out


def pixel_wise_filter(image, kernels):
    return pixel_wise_dilated_filter(image, kernels, 1)


def pixel_wise_dilated_filter_backward(image, kernels, l, grad_output):
    """Return ``(grad_image, grad_kernels)`` for ``pixel_wise_dilated_filter``."""
    if l < 1:
        raise InvalidArgument(f"dilation factor must be >= 1, got {l}")
    k = _check_pair(image, kernels)
    if grad_output.shape != image.shape:
        raise InvalidArgument(f"grad_output shape {grad_output.shape} != image shape {image.shape}")
    n, c, h, w = image.shape
    r = l * (k // 2)
    dtype = np.result_type(image, kernels, grad_output)
    padded = np.pad(image, ((0, 0), (0, 0), (r, r), (r, r)))
    grad_padded = np.zeros(padded.shape, dtype=dtype)
    grad_kernels = np.empty(kernels.shape, dtype=dtype)
    term = np.empty(image.shape, dtype=dtype)
    for ty in range(k):
        for tx in range(k):
            t = ty * k + tx
            oy, ox = ty * l, tx * l
            grad_kernels[:, t] = np.einsum("nchw,nchw->nhw", grad_output, padded[:, :, oy : oy + h, ox : ox + w])
            np.multiply(kernels[:, t, None], grad_output, out=term)
            grad_padded[:, :, oy : oy + h, ox : ox + w] += term
    grad_image = np.ascontiguousarray(grad_padded[:, :, r : r + h, r : r + w])
    return grad_image, grad_kernels


def softmax_kernels(logits):
    """Normalise each pixel's K*K weights with a softmax (optional mode)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_kernels_backward(kernels, grad_kernels):
    """Backward of ``softmax_kernels`` given its output ``kernels``."""
    dot = (grad_kernels * kernels).sum(axis=1, keepdims=True)
    return kernels * (grad_kernels - dot)


@dataclass
class FusionParams:
    """3x3 convolution mapping the stacked scale outputs back to image channels."""

    conv: ConvLayerParams
    n_scales: int

    def __post_init__(self):
        kh, kw = self.conv.weights.shape[2:]
        if (kh, kw) != (3, 3) or self.conv.padding != 1 or self.conv.stride != 1:
            raise InvalidArgument("fusion layer must be a 3x3 convolution with padding 1 and stride 1")
        if self.conv.c_in != self.n_scales * self.conv.c_out:
            raise InvalidArgument(
                f"fusion C_in={self.conv.c_in} must equal n_scales ({self.n_scales}) x C_out ({self.conv.c_out})"
            )

    @classmethod
    def averaging(cls, n_scales, channels, dtype=np.float64):
        """Weights that average the per-scale copies of each channel."""
        w = np.zeros((channels, n_scales * channels, 3, 3), dtype=dtype)
        for s in range(n_scales):
            for ch in range(channels):
                w[ch, s * channels + ch, 1, 1] = 1.0 / n_scales
        return cls(ConvLayerParams(w, np.zeros(channels, dtype=dtype), stride=1, padding=1), n_scales)


def fuse_scales(derained, params):
    """Concatenate the per-scale images (ascending dilation) and apply the 3x3 fusion conv."""
    if len(derained) != params.n_scales:
        raise InvalidArgument(f"fuse_scales: got {len(derained)} scale images, fusion expects {params.n_scales}")
    shape = derained[0].shape
    for d in derained:
        if d.shape != shape:
            raise InvalidArgument(f"fuse_scales: scale images must share a shape, got {d.shape} and {shape}")
    return conv2d_forward(concat_channels_forward(list(derained)), params.conv)


def fuse_scales_backward(derained, params, grad_output):
    """Return ``(list of grads per scale image, grad_weights, grad_bias)``."""
    stacked = concat_channels_forward(list(derained))
    grad_stacked, grad_w, grad_b = conv2d_backward(stacked, params.conv, grad_output)
    grads = concat_channels_backward([d.shape[1] for d in derained], grad_stacked)
    return grads, grad_w, grad_b


def multi_dilated_filter(image, kernels, dilations=DEFAULT_DILATIONS):
    """The list of per-scale filtered images, ascending in dilation order."""
    return [pixel_wise_dilated_filter(image, kernels, l) for l in sorted(validate_dilations(dilations))]
