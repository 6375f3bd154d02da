"""Layerwise calibration: jointly optimize an additive weight perturbation,
a bias perturbation, and the quantization steps/zero points of a layer to
minimize its quantized-vs-full-precision output MSE.

Two drivers exist: a parallel one (every layer calibrated independently
against full-precision inputs/outputs, composable into any mixed-precision
stitching) and a sequential one (each layer sees the quantized outputs of the
already-calibrated prefix while still targeting its full-precision output).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .graph import INPUT_ID, CalibrationSet, LayerNode, ModelGraph, forward
from .optim import Adam
from .quantizer import (
    PASSTHROUGH_BITS,
    MIN_STEP,
    QuantParams,
    calibrate_step_mse,
    init_minmax,
    quantize,
    ste_backward,
)


class CalibrationError(RuntimeError):
    pass


@dataclass
class AdaQuantConfig:
    iterations: int = 100
    batch_size: int = 50
    lr_weight: float = 1e-5
    lr_bias: float = 1e-3
    lr_act_step: float = 1e-1
    lr_weight_step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10  # full-set MSE checkpoints for best-so-far tracking
    weight_init: str = "minmax"  # "minmax" keeps iteration 0 == round-to-nearest

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.weight_init not in ("minmax", "mse"):
            raise ValueError(f"unknown weight_init {self.weight_init!r}")
        for name in ("batch_size", "lr_weight", "lr_bias", "lr_act_step", "lr_weight_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LayerCalibResult:
    layer_id: str
    weight_delta: np.ndarray
    bias_delta: np.ndarray
    weight_q: QuantParams
    act_q: QuantParams
    initial_mse: float
    final_mse: float
    init_weight_q: QuantParams | None = None


def min_calibration_size(node: LayerNode, out_hw: tuple[int, int] | None = None) -> int:
    """Samples needed to avoid over-fitting the layerwise objective.

    fc: the input width N.  conv: ceil(Ci * k^2 / (H*W)) over the output
    spatial dims, floored at 1.
    """
    if node.kind == "fc":
        return int(node.params["weight"].shape[1])
    if node.kind == "conv2d":
        if out_hw is None:
            out = node.meta.get("out_shape")
            if out is None:
                raise ValueError("conv node needs inferred shapes or an explicit out_hw")
            out_hw = (out[1], out[2])
        h, w = out_hw
        return max(1, math.ceil(node.spec.in_channels * node.spec.kernel**2 / (h * w)))
    raise ValueError(f"min_calibration_size undefined for kind {node.kind!r}")


def _layer_fwd(node: LayerNode, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if node.kind == "fc":
        return x @ w.T + b
    return tc.conv2d(x, w, b, node.spec)


def _layer_grads(node: LayerNode, x: np.ndarray, w: np.ndarray, up: np.ndarray):
    if node.kind == "fc":
        return up.T @ x, up.sum(axis=0), up @ w
    gx, gw, gb = tc.conv2d_backward(x, w, node.spec, up)
    return gw, gb, gx


def _layer_seed(seed: int, layer_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(layer_id.encode())])


def adaquant_layer(
    node: LayerNode,
    x_fp: np.ndarray,
    cfg: AdaQuantConfig,
    y_target: np.ndarray | None = None,
) -> LayerCalibResult:
    """Calibrate one fc/conv layer against its full-precision output.

    The node must carry initialized weight_q/act_q (or None for passthrough).
    ``x_fp`` is the layer input collected over the calibration set; the
    target defaults to the layer's own full-precision output on it.
    Deterministic given cfg.seed; the returned parameters are the best
    checkpoint, so the final MSE never exceeds the round-to-nearest initial.
    """
    if not node.is_weight_layer():
        raise ValueError(f"adaquant applies to fc/conv layers, not {node.kind!r}")
    wq = (node.weight_q or QuantParams.passthrough()).copy()
    aq = (node.act_q or QuantParams.passthrough()).copy()
    init_wq = wq.copy()
    weight = node.params["weight"].astype(np.float32)
    bias = node.params["bias"].astype(np.float32)
    if y_target is None:
        y_target = _layer_fwd(node, x_fp, weight, bias)

    n = x_fp.shape[0]
    d_weight = np.zeros(weight.shape, dtype=np.float64)
    d_bias = np.zeros(bias.shape, dtype=np.float64)
    w_step = np.atleast_1d(wq.step).astype(np.float64)
    w_zero = np.atleast_1d(wq.zero_point).astype(np.float64)
    a_step = np.atleast_1d(aq.step).astype(np.float64)
    a_zero = np.atleast_1d(aq.zero_point).astype(np.float64)

    def current_params():
        wq2 = wq.copy()
        wq2.step = w_step.reshape(wq.step.shape).copy()
        wq2.zero_point = w_zero.reshape(wq.zero_point.shape).copy()
        aq2 = aq.copy()
        aq2.step = a_step.reshape(aq.step.shape).copy()
        aq2.zero_point = a_zero.reshape(aq.zero_point.shape).copy()
        return wq2, aq2

    def full_mse():
        wq2, aq2 = current_params()
        xq = quantize(x_fp, aq2)
        wquant = quantize((weight + d_weight).astype(np.float32), wq2)
        pred = _layer_fwd(node, xq, wquant, (bias + d_bias).astype(np.float32))
        return float(np.mean((pred.astype(np.float64) - y_target.astype(np.float64)) ** 2))

    initial_mse = full_mse()
    best = {
        "mse": initial_mse,
        "dw": d_weight.copy(),
        "db": d_bias.copy(),
        "ws": w_step.copy(),
        "wz": w_zero.copy(),
        "xs": a_step.copy(),
        "xz": a_zero.copy(),
    }

    optimizer = Adam(
        [
            {"params": [d_weight], "lr": cfg.lr_weight},
            {"params": [d_bias], "lr": cfg.lr_bias},
            {"params": [a_step, a_zero], "lr": cfg.lr_act_step},
            {"params": [w_step, w_zero], "lr": cfg.lr_weight_step},
        ],
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
    )

    def snapshot(mse: float) -> None:
        best.update(
            mse=mse,
            dw=d_weight.copy(),
            db=d_bias.copy(),
            ws=w_step.copy(),
            wz=w_zero.copy(),
            xs=a_step.copy(),
            xz=a_zero.copy(),
        )

    # Checkpoint every iteration while the full set is cheap to evaluate;
    # the loss trajectory oscillates, so coarse sampling misses minima.
    eval_every = 1 if n <= 2 * cfg.batch_size else cfg.eval_every

    rng = _layer_seed(cfg.seed, node.id)
    order = rng.permutation(n)
    cursor = 0
    for it in range(cfg.iterations):
        take = min(cfg.batch_size, n)
        if cursor + take > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + take]
        cursor += take
        xb = x_fp[idx]
        yb = y_target[idx]

        wq2, aq2 = current_params()
        w_pert = (weight + d_weight).astype(np.float32)
        b_pert = (bias + d_bias).astype(np.float32)
        xq = quantize(xb, aq2)
        wquant = quantize(w_pert, wq2)
        pred = _layer_fwd(node, xq, wquant, b_pert)
        resid = pred.astype(np.float64) - yb.astype(np.float64)
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise CalibrationError(f"adaquant diverged on layer {node.id!r}")
        if take == n and loss < best["mse"]:
            snapshot(loss)  # full batch: the in-loop loss is the full-set MSE

        d_out = (2.0 / resid.size) * resid.astype(np.float32)
        g_wq, g_bias, g_xq = _layer_grads(node, xq, wquant, d_out)
        g_wpert, g_wstep, g_wzero = ste_backward(w_pert, wq2, g_wq)
        _, g_astep, g_azero = ste_backward(xb, aq2, g_xq)

        optimizer.step(
            [
                [g_wpert],
                [g_bias],
                [np.atleast_1d(g_astep), np.atleast_1d(g_azero)],
                [np.atleast_1d(g_wstep), np.atleast_1d(g_wzero)],
            ]
        )
        np.maximum(w_step, MIN_STEP, out=w_step)
        np.maximum(a_step, MIN_STEP, out=a_step)

        if take != n and ((it + 1) % eval_every == 0 or it + 1 == cfg.iterations):
            mse = full_mse()
            if mse < best["mse"]:
                snapshot(mse)

    wq_final = wq.copy()
    wq_final.step = best["ws"].reshape(wq.step.shape)
    wq_final.zero_point = best["wz"].reshape(wq.zero_point.shape)
    aq_final = aq.copy()
    aq_final.step = best["xs"].reshape(aq.step.shape)
    aq_final.zero_point = best["xz"].reshape(aq.zero_point.shape)
    return LayerCalibResult(
        layer_id=node.id,
        weight_delta=best["dw"].astype(np.float32),
        bias_delta=best["db"].astype(np.float32),
        weight_q=wq_final,
        act_q=aq_final,
        initial_mse=initial_mse,
        final_mse=best["mse"],
        init_weight_q=init_wq,
    )


def _init_layer_quant(
    node: LayerNode, x_in: np.ndarray, w_bits: int, a_bits: int, weight_init: str = "minmax"
) -> None:
    """Per-channel weight steps (full-range or MSE-searched), min-max acts."""
    init = init_minmax if weight_init == "minmax" else calibrate_step_mse
    node.weight_q = init(node.params["weight"], w_bits, "per_channel", axis=0)
    node.act_q = init_minmax(x_in, a_bits)


def adaquant_parallel(
    g: ModelGraph, calib: CalibrationSet, bitcfg: dict[str, tuple[int, int]], cfg: AdaQuantConfig
) -> list[LayerCalibResult]:
    """Calibrate every weight layer independently against FP activations.

    Per-layer results are bit-identical regardless of processing order (each
    layer derives its own RNG stream from cfg.seed and its id).
    """
    g = g.copy()
    g.infer_shapes()
    _, values = forward(g, calib.inputs, use_quant=False, return_values=True)
    results = []
    for node in g.weight_layers():
        w_bits, a_bits = bitcfg[node.id]
        x_fp = values[node.inputs[0]]
        _init_layer_quant(node, x_fp, w_bits, a_bits, cfg.weight_init)
        results.append(adaquant_layer(node, x_fp, cfg))
    return results


def adaquant_sequential(
    g: ModelGraph, calib: CalibrationSet, bitcfg: dict[str, tuple[int, int]], cfg: AdaQuantConfig
) -> list[LayerCalibResult]:
    """Calibrate layers in topological order against FP targets, feeding each
    layer the quantized outputs of the already-calibrated prefix.

    Meant for a fixed bit configuration (the propagated inputs assume the
    final precision assignment).
    """
    g = g.copy()
    g.infer_shapes()
    _, fp_values = forward(g, calib.inputs, use_quant=False, return_values=True)
    qvals: dict[str, np.ndarray] = {INPUT_ID: calib.inputs}
    results = []
    for node in g.nodes:
        if node.is_weight_layer():
            w_bits, a_bits = bitcfg[node.id]
            x_q = qvals[node.inputs[0]]
            _init_layer_quant(node, x_q, w_bits, a_bits, cfg.weight_init)
            res = adaquant_layer(node, x_q, cfg, y_target=fp_values[node.id])
            node.params["weight"] = (node.params["weight"] + res.weight_delta).astype(np.float32)
            node.params["bias"] = (node.params["bias"] + res.bias_delta).astype(np.float32)
            node.weight_q = res.weight_q
            node.act_q = res.act_q
            xq = quantize(x_q, node.act_q)
            wq = quantize(node.params["weight"], node.weight_q)
            qvals[node.id] = _layer_fwd(node, xq, wq, node.params["bias"])
            results.append(res)
        elif node.kind == "add":
            y = tc.layer_forward(node, [qvals[i] for i in node.inputs])
            if node.act_q is None and node.meta.get("act_bits"):
                node.act_q = init_minmax(y, int(node.meta["act_bits"]))
            qvals[node.id] = quantize(y, node.act_q) if node.act_q is not None else y
        else:
            qvals[node.id] = tc.layer_forward(node, qvals[node.inputs[0]])
    return results


def apply_calibration(g: ModelGraph, results: list[LayerCalibResult]) -> ModelGraph:
    """Fold calibration results into a graph copy (stitching is selection)."""
    g = g.copy()
    by_id = {r.layer_id: r for r in results}
    for node in g.nodes:
        res = by_id.get(node.id)
        if res is None:
            continue
        node.params["weight"] = (node.params["weight"] + res.weight_delta).astype(np.float32)
        node.params["bias"] = (node.params["bias"] + res.bias_delta).astype(np.float32)
        node.weight_q = res.weight_q.copy()
        node.act_q = res.act_q.copy()
    return g
