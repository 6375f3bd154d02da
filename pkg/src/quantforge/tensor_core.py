"""Dense tensor math and the forward/backward kernels for the supported layers.

Everything here is a pure function on numpy arrays.  Layer dispatch works on
any object exposing ``kind``, ``params`` and ``spec`` attributes, so the graph
module stays a thin structural layer on top of these kernels.

Supported layer kinds: fc, conv2d, batchnorm2d, relu, avgpool, flatten, add.
Gradients exist exactly for this set; there is no general autograd tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instrumentation import record_backward_call

SUPPORTED_KINDS = ("fc", "conv2d", "batchnorm2d", "relu", "avgpool", "flatten", "add")


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce external data to a float32 array, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=np.float32)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ValueError(
                f"size mismatch: shape {tuple(shape)} needs {int(np.prod(shape))} "
                f"values, got {arr.size}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution (square kernel, symmetric padding)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel) < 1:
            raise ValueError("kernel and channel counts must be >= 1")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("invalid stride/padding")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"conv output collapses to {oh}x{ow}")
        return oh, ow


@dataclass(frozen=True)
class PoolSpec:
    """Non-overlapping average pooling: stride equals the kernel."""

    kernel: int

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError("pool kernel must be >= 1")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B,C,oh,ow,k,k] sliding windows (view, no copy)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride, :, :]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with bias.  x: [B,Ci,H,W], w: [Co,Ci,k,k], b: [Co]."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError("conv2d input must be [B,C,H,W]")
    bsz, ci, h, wd = x.shape
    if ci != spec.in_channels or w.shape != (
        spec.out_channels,
        spec.in_channels,
        spec.kernel,
        spec.kernel,
    ):
        raise ValueError(f"conv2d weight/input mismatch: x {x.shape}, w {w.shape}, spec {spec}")
    if b.shape != (spec.out_channels,):
        raise ValueError("conv2d bias shape mismatch")
    oh, ow = spec.out_hw(h, wd)
    xp = _pad2d(x, spec.padding)
    win = _windows(xp, spec.kernel, spec.stride)  # [B,Ci,oh,ow,k,k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * oh * ow, ci * spec.kernel * spec.kernel
    )
    wmat = w.reshape(spec.out_channels, -1)
    y = cols @ wmat.T + b
    return np.ascontiguousarray(y.reshape(bsz, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, spec: ConvSpec, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (x, w, b) given upstream [B,Co,oh,ow]."""
    bsz, ci, h, wd = x.shape
    k, stride, pad = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.out_hw(h, wd)
    xp = _pad2d(x, pad)
    win = _windows(xp, k, stride)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * oh * ow, ci * k * k)
    upm = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(bsz * oh * ow, spec.out_channels)

    grad_b = upstream.sum(axis=(0, 2, 3))
    grad_w = (upm.T @ cols).reshape(spec.out_channels, ci, k, k)

    grad_cols = upm @ w.reshape(spec.out_channels, -1)  # [B*oh*ow, Ci*k*k]
    grad_win = grad_cols.reshape(bsz, oh, ow, ci, k, k)
    grad_xp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                grad_win[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + wd] if pad else grad_xp
    return grad_x, grad_w, grad_b


def avgpool2d(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    bsz, c, h, w = x.shape
    k = spec.kernel
    if h % k or w % k:
        raise ValueError(f"avgpool kernel {k} must divide spatial dims {h}x{w}")
    return x.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool2d_backward(x_shape, spec: PoolSpec, upstream: np.ndarray) -> np.ndarray:
    bsz, c, h, w = x_shape
    k = spec.kernel
    g = upstream / (k * k)
    g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
    return g.reshape(bsz, c, h, w)


def batchnorm2d(x, gamma, beta, mean, var, eps):
    inv = gamma / np.sqrt(var + eps)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return x * inv.reshape(shape) + (beta - mean * inv).reshape(shape)


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def layer_forward(node, x):
    """Run one layer.  ``x`` is the input array, or a list of two for add."""
    kind = node.kind
    p = node.params
    if kind == "fc":
        if x.ndim != 2:
            raise ValueError("fc input must be [B,N]")
        w = p["weight"]
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"fc shape mismatch: x {x.shape}, w {w.shape}")
        return x @ w.T + p["bias"]
    if kind == "conv2d":
        return conv2d(x, p["weight"], p["bias"], node.spec)
    if kind == "batchnorm2d":
        return batchnorm2d(x, p["gamma"], p["beta"], p["mean"], p["var"], float(p["eps"]))
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "avgpool":
        return avgpool2d(x, node.spec)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "add":
        a, b = x
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return a + b
    raise ValueError(f"unsupported layer kind: {kind}")


def layer_backward(node, x, upstream):
    """Analytic gradients: returns (grad_x, grad_params).

    grad_x mirrors the input structure (a pair for add).  relu's subgradient
    at 0 is 0.
    """
    record_backward_call()
    kind = node.kind
    p = node.params
    if kind == "fc":
        return upstream @ p["weight"], {"weight": upstream.T @ x, "bias": upstream.sum(axis=0)}
    if kind == "conv2d":
        gx, gw, gb = conv2d_backward(x, p["weight"], node.spec, upstream)
        return gx, {"weight": gw, "bias": gb}
    if kind == "batchnorm2d":
        eps = float(p["eps"])
        inv = 1.0 / np.sqrt(p["var"] + eps)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        xhat = (x - p["mean"].reshape(shape)) * inv.reshape(shape)
        axes = _bn_axes(x)
        grad_x = upstream * (p["gamma"] * inv).reshape(shape)
        grads = {
            "gamma": (upstream * xhat).sum(axis=axes),
            "beta": upstream.sum(axis=axes),
            "mean": -(upstream.sum(axis=axes)) * p["gamma"] * inv,
            "var": (upstream * (x - p["mean"].reshape(shape))).sum(axis=axes)
            * p["gamma"]
            * (-0.5)
            * inv**3,
        }
        return grad_x, grads
    if kind == "relu":
        return upstream * (x > 0), {}
    if kind == "avgpool":
        return avgpool2d_backward(x.shape, node.spec, upstream), {}
    if kind == "flatten":
        return upstream.reshape(x.shape), {}
    if kind == "add":
        return (upstream, upstream), {}
    raise ValueError(f"unsupported layer kind: {kind}")
