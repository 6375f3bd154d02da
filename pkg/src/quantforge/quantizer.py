"""Asymmetric affine fake-quantization with a quantized zero point.

The dequantized value is ``s * (c + round(z/s))`` where the integer code
``c = clip(round(x/s - round(z/s)), 0, 2**bits - 1)``.  All rounding is
round-half-to-even.  Step/zero-point arithmetic runs in float64 so that the
per-channel positive-rescale identity (codes invariant under jointly scaling
x, step and zero point) holds at the stored-value resolution; the dequantized
output is returned in the input's dtype.

bits == 32 is a passthrough (identity) quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instrumentation import record_backward_call

PASSTHROUGH_BITS = 32
MIN_STEP = 1e-8  # degenerate flat-range fallback


@dataclass
class QuantParams:
    """Per-tensor or per-channel affine quantizer parameters.

    ``step`` and ``zero_point`` are float64 arrays: 0-d for per_tensor, 1-d of
    length C for per_channel (``axis`` indexes the channel dim of the target
    tensor; weights use the output-channel axis 0).
    """

    bits: int
    step: np.ndarray
    zero_point: np.ndarray
    granularity: str = "per_tensor"
    axis: int | None = None

    def __post_init__(self):
        if self.bits != PASSTHROUGH_BITS and not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2,8] or 32, got {self.bits}")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "per_channel" and self.axis is None:
            raise ValueError("per_channel quantizer needs an axis")
        self.step = np.asarray(self.step, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.float64)
        if self.step.shape != self.zero_point.shape:
            raise ValueError("step and zero_point must have the same shape")
        if np.any(self.step <= 0):
            raise ValueError("quantization step must be positive")

    @classmethod
    def passthrough(cls) -> "QuantParams":
        return cls(bits=PASSTHROUGH_BITS, step=np.float64(1.0), zero_point=np.float64(0.0))

    @property
    def num_levels(self) -> int:
        return 1 << self.bits

    def copy(self) -> "QuantParams":
        return QuantParams(
            self.bits, self.step.copy(), self.zero_point.copy(), self.granularity, self.axis
        )

    def scaled(self, factor: np.ndarray) -> "QuantParams":
        """New params with step and zero point multiplied channelwise."""
        f = np.asarray(factor, dtype=np.float64).reshape(self.step.shape)
        return QuantParams(self.bits, self.step * f, self.zero_point * f, self.granularity, self.axis)


def _expand(p: np.ndarray, q: QuantParams, ndim: int) -> np.ndarray:
    if q.granularity == "per_tensor":
        return p
    shape = [1] * ndim
    shape[q.axis] = p.shape[0]
    return p.reshape(shape)


def _check(x: np.ndarray, q: QuantParams) -> None:
    if q.granularity == "per_channel" and x.shape[q.axis] != q.step.shape[0]:
        raise ValueError(
            f"per-channel quantizer has {q.step.shape[0]} channels, tensor axis "
            f"{q.axis} has {x.shape[q.axis]}"
        )


def quant_codes(x: np.ndarray, q: QuantParams) -> np.ndarray:
    """Integer codes in [0, 2**bits - 1] (int64)."""
    if q.bits == PASSTHROUGH_BITS:
        raise ValueError("passthrough quantizer has no integer codes")
    _check(x, q)
    s = _expand(q.step, q, x.ndim)
    zq = np.rint(_expand(q.zero_point, q, x.ndim) / s)
    t = x.astype(np.float64) / s - zq
    return np.clip(np.rint(t), 0, q.num_levels - 1).astype(np.int64)


def dequantize(codes: np.ndarray, q: QuantParams, dtype=np.float32) -> np.ndarray:
    s = _expand(q.step, q, codes.ndim)
    zq = np.rint(_expand(q.zero_point, q, codes.ndim) / s)
    return (s * (codes + zq)).astype(dtype)


def quantize(x: np.ndarray, q: QuantParams | None) -> np.ndarray:
    """Fake-quantize: project x onto the affine lattice.  Idempotent."""
    if q is None or q.bits == PASSTHROUGH_BITS:
        return x
    return dequantize(quant_codes(x, q), q, dtype=x.dtype)


def _ranges(x: np.ndarray, granularity: str, axis: int) -> tuple[np.ndarray, np.ndarray]:
    if granularity == "per_tensor":
        return np.float64(x.min()), np.float64(x.max())
    other = tuple(i for i in range(x.ndim) if i != axis)
    return x.min(axis=other).astype(np.float64), x.max(axis=other).astype(np.float64)


def init_minmax(x: np.ndarray, bits: int, granularity: str = "per_tensor", axis: int = 0) -> QuantParams:
    """Full-dynamic-range initialization: step = (max-min)/(2^bits-1), zero = min.

    Flat (constant) slices fall back to step = 1e-8, which reconstructs the
    constant exactly at unit scale.
    """
    if x.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if bits == PASSTHROUGH_BITS:
        return QuantParams.passthrough()
    lo, hi = _ranges(x, granularity, axis)
    step = (hi - lo) / (2**bits - 1)
    step = np.where(step > 0, step, MIN_STEP)
    return QuantParams(bits, step, lo, granularity, axis if granularity == "per_channel" else None)


def _mse(x: np.ndarray, q: QuantParams, granularity: str, axis: int) -> np.ndarray:
    err = (x.astype(np.float64) - quantize(x.astype(np.float64), q)) ** 2
    if granularity == "per_tensor":
        return err.mean()
    other = tuple(i for i in range(x.ndim) if i != axis)
    return err.mean(axis=other)


def calibrate_step_mse(
    x: np.ndarray, bits: int, granularity: str = "per_tensor", axis: int = 0
) -> QuantParams:
    """Grid-search the step that minimizes reconstruction MSE.

    Scans 200 multiples of the min-max step in [0.2, 1.2] plus the exact
    min-max point, so the result is never worse than init_minmax.  Ties go to
    the smaller step.
    """
    base = init_minmax(x, bits, granularity, axis)
    if bits == PASSTHROUGH_BITS:
        return base
    alphas = np.sort(np.append(np.linspace(0.2, 1.2, 200), 1.0))
    best_mse = None
    best_alpha = None
    for a in alphas:
        q = QuantParams(bits, base.step * a, base.zero_point, granularity, base.axis)
        m = _mse(x, q, granularity, axis)
        if best_mse is None:
            best_mse, best_alpha = m, np.full_like(base.step, a)
        elif granularity == "per_tensor":
            if m < best_mse:
                best_mse, best_alpha = m, np.full_like(base.step, a)
        else:
            better = m < best_mse
            best_mse = np.where(better, m, best_mse)
            best_alpha = np.where(better, a, best_alpha)
    return QuantParams(bits, base.step * best_alpha, base.zero_point, granularity, base.axis)


def ste_backward(
    x: np.ndarray, q: QuantParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Straight-through gradients of the fake-quant output.

    grad_x passes upstream through where the clamp is inactive and is zero
    outside.  grad_step follows the learned-step rule with the rounded codes
    (and the integer zero point) held fixed: ``c + zq - x/s`` in range and
    ``c_clamped + zq`` at the clamp.  grad_zero is the clamp indicator.
    Shapes of grad_step/grad_zero match q.step.
    """
    record_backward_call()
    if q.bits == PASSTHROUGH_BITS:
        return upstream, np.zeros_like(q.step), np.zeros_like(q.zero_point)
    _check(x, q)
    s = _expand(q.step, q, x.ndim)
    zq = np.rint(_expand(q.zero_point, q, x.ndim) / s)
    t = x.astype(np.float64) / s - zq
    raw = np.rint(t)
    in_range = (raw >= 0) & (raw <= q.num_levels - 1)

    grad_x = np.where(in_range, upstream, 0).astype(upstream.dtype)
    per_elem_s = np.where(in_range, raw + zq - x.astype(np.float64) / s, np.clip(raw, 0, q.num_levels - 1) + zq)
    per_elem_z = (~in_range).astype(np.float64)

    up = upstream.astype(np.float64)
    if q.granularity == "per_tensor":
        grad_step = np.float64((up * per_elem_s).sum())
        grad_zero = np.float64((up * per_elem_z).sum())
    else:
        other = tuple(i for i in range(x.ndim) if i != q.axis)
        grad_step = (up * per_elem_s).sum(axis=other)
        grad_zero = (up * per_elem_z).sum(axis=other)
    return grad_x, grad_step, grad_zero
