"""Naive reference interpreter: per-definition math, no clever lowering.

Convolutions accumulate one (channel, kernel-offset) contribution at a
time; dense layers sum explicit elementwise products.  Slow but
transparent — this backend is the semantic baseline the other
interpreters are compared against.
"""
from __future__ import annotations

import numpy as np

from ..ir import GraphModel, TensorValue, as_pair, conv_out_dim, same_pad_amounts
from .core import KernelTable, run_interpreter
from .trace import CaptureOptions, ExecutionTrace

__all__ = ["REFERENCE_KERNELS", "reference_interpret"]


def pad_for_window(x: np.ndarray, window: tuple[int, int], stride: int,
                   padding: str, fill: float) -> tuple[np.ndarray, int, int]:
    """Pad spatial axes for a windowed op; returns (padded, out_h, out_w)."""
    n, c, h, w = x.shape
    wh, ww = window
    ho = conv_out_dim(h, wh, stride, padding)
    wo = conv_out_dim(w, ww, stride, padding)
    if padding == "same":
        pt, pb = same_pad_amounts(h, wh, stride)
        pl, pr = same_pad_amounts(w, ww, stride)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                       constant_values=np.float32(fill))
    return x, ho, wo


def _window_slice(xp: np.ndarray, c: int, i: int, j: int, stride: int,
                  ho: int, wo: int) -> np.ndarray:
    """The (N, ho, wo) stencil of channel ``c`` at kernel offset (i, j)."""
    return xp[:, c, i : i + stride * (ho - 1) + 1 : stride,
              j : j + stride * (wo - 1) + 1 : stride]


def _conv2d(inputs, node, weights, attrs):
    # Long reductions accumulate in float64 and round to float32 once at
    # the end, so the result is the correctly-rounded definition rather
    # than an artifact of accumulation order.
    x = inputs[0]
    kernel, bias = weights
    kh, kw = as_pair(attrs["kernel"])
    stride = attrs["stride"]
    xp, ho, wo = pad_for_window(x, (kh, kw), stride, attrs["padding"], 0.0)
    n = x.shape[0]
    filters, in_ch = kernel.shape[0], kernel.shape[1]
    kernel64 = kernel.astype(np.float64)
    out = np.zeros((n, filters, ho, wo), dtype=np.float64)
    for c in range(in_ch):
        for i in range(kh):
            for j in range(kw):
                patch = _window_slice(xp, c, i, j, stride, ho, wo)
                out += kernel64[:, c, i, j][None, :, None, None] * patch[:, None, :, :]
    return (out + bias[None, :, None, None]).astype(np.float32)


def _dense(inputs, node, weights, attrs):
    x = inputs[0]
    kernel, bias = weights
    products = x[:, :, None] * kernel[None, :, :].astype(np.float64)
    return (np.sum(products, axis=1) + bias[None, :]).astype(np.float32)


def _batchnorm(inputs, node, weights, attrs):
    x = inputs[0]
    scale, bias, mean, var = weights
    span = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    normalized = (x - mean.reshape(span)) / np.sqrt(var.reshape(span) + np.float32(attrs["epsilon"]))
    return normalized * scale.reshape(span) + bias.reshape(span)


def _max_pool(inputs, node, weights, attrs):
    x = inputs[0]
    ph, pw = as_pair(attrs["pool"])
    stride = attrs["stride"] or max(ph, pw)
    xp, ho, wo = pad_for_window(x, (ph, pw), stride, attrs["padding"], -np.inf)
    out = np.full((x.shape[0], x.shape[1], ho, wo), -np.inf, dtype=np.float32)
    for c in range(x.shape[1]):
        for i in range(ph):
            for j in range(pw):
                out[:, c] = np.maximum(out[:, c], _window_slice(xp, c, i, j, stride, ho, wo))
    return out


def _avg_pool(inputs, node, weights, attrs):
    # Padded cells do not count toward the average: sum real cells and
    # divide by the per-window count of them.
    x = inputs[0]
    ph, pw = as_pair(attrs["pool"])
    stride = attrs["stride"] or max(ph, pw)
    xp, ho, wo = pad_for_window(x, (ph, pw), stride, attrs["padding"], 0.0)
    ones = np.ones(x.shape[2:], dtype=np.float32)
    onesp, _, _ = pad_for_window(ones[None, None], (ph, pw), stride, attrs["padding"], 0.0)
    total = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.float32)
    count = np.zeros((1, 1, ho, wo), dtype=np.float32)
    for i in range(ph):
        for j in range(pw):
            count += _window_slice(onesp, 0, i, j, stride, ho, wo)[:, None]
            for c in range(x.shape[1]):
                total[:, c] += _window_slice(xp, c, i, j, stride, ho, wo)
    return total / count


def _softmax(inputs, node, weights, attrs):
    x = inputs[0]
    axis = attrs["axis"]
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _pad(inputs, node, weights, attrs):
    x = inputs[0]
    raw = attrs["pads"]
    pads = [raw] if isinstance(raw, int) else list(raw)
    widths = [(pads[2 * i], pads[2 * i + 1]) for i in range(x.ndim)]
    return np.pad(x, widths, constant_values=np.float32(attrs["value"]))


REFERENCE_KERNELS: KernelTable = {
    "Conv2D": _conv2d,
    "Dense": _dense,
    "BatchNorm": _batchnorm,
    "MaxPool": _max_pool,
    "AvgPool": _avg_pool,
    "ReLU": lambda inputs, node, weights, attrs: np.maximum(inputs[0], np.float32(0.0)),
    "ReLU6": lambda inputs, node, weights, attrs: np.minimum(
        np.maximum(inputs[0], np.float32(0.0)), np.float32(6.0)
    ),
    "Sigmoid": lambda inputs, node, weights, attrs: np.float32(1.0) / (np.float32(1.0) + np.exp(-inputs[0])),
    "Tanh": lambda inputs, node, weights, attrs: np.tanh(inputs[0]),
    "Softmax": _softmax,
    "Flatten": lambda inputs, node, weights, attrs: inputs[0].reshape(inputs[0].shape[0], -1),
    "Reshape": lambda inputs, node, weights, attrs: inputs[0].reshape(
        tuple(int(d) for d in attrs["shape"])
    ),
    "Pad": _pad,
    "Add": lambda inputs, node, weights, attrs: inputs[0] + inputs[1],
    "Mul": lambda inputs, node, weights, attrs: inputs[0] * inputs[1],
    "Concat": lambda inputs, node, weights, attrs: np.concatenate(inputs, axis=attrs["axis"]),
}


def reference_interpret(model: GraphModel, input_value: TensorValue,
                        capture: CaptureOptions | None = None) -> ExecutionTrace:
    """Run ``model`` with the naive kernels; failures become crash entries."""
    return run_interpreter(model, input_value, REFERENCE_KERNELS, "reference", capture)
