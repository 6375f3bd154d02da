"""Batch-norm statistics tuning for fused quantized models.

Three forward-only phases: reconstruct an exact-identity bn after each layer
that previously absorbed one, re-collect running statistics under active
quantizers on the calibration set, and fold the bn back — with the
per-channel weight quantization step and zero point rescaled by the same
factor as the weights, which keeps the integer weight codes bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import CalibrationSet, GraphError, LayerNode, ModelGraph, forward
from .quantizer import quantize
from .tensor_core import layer_forward

BN_SUFFIX = ".bn_r"
DEFAULT_MOMENTUM = 0.1


@dataclass
class BnState:
    """Reconstructed-bn state: trainable-free, statistics only move."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray  # frozen, sqrt(gamma_o^2 + eps) by construction
    beta: np.ndarray  # frozen, beta_o
    eps: float
    momentum: float = DEFAULT_MOMENTUM


def reconstruct_bn(g: ModelGraph, original_bn_params: dict | None = None) -> ModelGraph:
    """Insert an identity batch-norm after every layer that absorbed one.

    The inserted layer is exact identity at initialization: mean = beta =
    original beta, var = original gamma^2, gamma = sqrt(original gamma^2 +
    eps).  Original affines default to the record kept by fuse_conv_bn.
    """
    g = g.copy()
    nodes: list[LayerNode] = []
    remap: dict[str, str] = {}
    for node in g.nodes:
        node.inputs = [remap.get(i, i) for i in node.inputs]
        nodes.append(node)
        origin = (
            original_bn_params.get(node.id)
            if original_bn_params is not None
            else node.meta.get("bn_origin")
        )
        if origin is None or not node.is_weight_layer():
            continue
        gamma_o = np.asarray(origin["gamma"], dtype=np.float64)
        beta_o = np.asarray(origin["beta"], dtype=np.float64)
        eps = float(origin["eps"])
        bn = LayerNode(
            id=node.id + BN_SUFFIX,
            kind="batchnorm2d",
            params={
                "gamma": np.sqrt(gamma_o**2 + eps).astype(np.float32),
                "beta": beta_o.astype(np.float32),
                "mean": beta_o.astype(np.float32),
                "var": (gamma_o**2).astype(np.float32),
                "eps": np.float32(eps),
            },
            inputs=[node.id],
            meta={"reconstructed": True},
        )
        nodes.append(bn)
        remap[node.id] = bn.id
    output_id = remap.get(g.output_id, g.output_id)
    return ModelGraph(nodes, tuple(g.input_shape), output_id)


def tune_bn(g: ModelGraph, calib: CalibrationSet, iterations: int = 10) -> ModelGraph:
    """Re-estimate bn running statistics by forward passes only.

    Exponential moving average with momentum 0.1 over full calibration
    passes; the bn affine (gamma, beta) never changes and no gradients are
    computed.  Variances are floored at eps so degenerate channels stay
    finite.
    """
    g = g.copy()
    bn_nodes = [n for n in g.nodes if n.kind == "batchnorm2d"]
    if not bn_nodes:
        return g
    for _ in range(iterations):
        _, values = forward(g, calib.inputs, use_quant=True, return_values=True)
        for node in bn_nodes:
            x = values[node.inputs[0]].astype(np.float64)
            axes = (0,) + tuple(range(2, x.ndim))
            batch_mean = x.mean(axis=axes)
            batch_var = x.var(axis=axes)
            m = DEFAULT_MOMENTUM
            eps = float(node.params["eps"])
            mean = (1 - m) * node.params["mean"].astype(np.float64) + m * batch_mean
            var = (1 - m) * node.params["var"].astype(np.float64) + m * batch_var
            node.params["mean"] = mean.astype(np.float32)
            node.params["var"] = np.maximum(var, eps).astype(np.float32)
    return g


def refuse_bn(g: ModelGraph) -> ModelGraph:
    """Fold reconstructed bn layers back into their producers.

    Per channel, with sigma = sqrt(var + eps) and ratio = gamma / sigma:
    weight' = ratio * weight, bias' = ratio * (bias - mean) + beta, and the
    weight quantizer's step and zero point are rescaled by the same ratio.
    Weights are first projected onto their quantization lattice (a no-op for
    the quantized forward path), which makes the integer codes of the
    rescaled layer provably identical to the original ones.

    Requires per-channel weight quantization when the producer is quantized.
    """
    g = g.copy()
    by_id = {n.id: n for n in g.nodes}
    kept: list[LayerNode] = []
    remap: dict[str, str] = {}
    for node in g.nodes:
        node.inputs = [remap.get(i, i) for i in node.inputs]
        if not (node.kind == "batchnorm2d" and node.meta.get("reconstructed")):
            kept.append(node)
            continue
        prev = by_id.get(node.inputs[0])
        if prev is None or not prev.is_weight_layer():
            raise GraphError(f"reconstructed bn {node.id!r} does not follow a weight layer")
        if prev.weight_q is not None and prev.weight_q.granularity != "per_channel":
            raise GraphError(
                f"re-fusing bn into {prev.id!r} requires per-channel weight quantization"
            )
        eps = float(node.params["eps"])
        sigma = np.sqrt(node.params["var"].astype(np.float64) + eps)
        ratio = node.params["gamma"].astype(np.float64) / sigma
        mean = node.params["mean"].astype(np.float64)
        beta = node.params["beta"].astype(np.float64)

        w = prev.params["weight"]
        if prev.weight_q is not None:
            w = quantize(w, prev.weight_q)  # lattice projection, forward-invariant
        w64 = w.astype(np.float64)
        w64 = w64 * ratio.reshape((-1,) + (1,) * (w64.ndim - 1))
        prev.params["weight"] = w64.astype(np.float32)
        prev.params["bias"] = (
            ratio * (prev.params["bias"].astype(np.float64) - mean) + beta
        ).astype(np.float32)
        if prev.weight_q is not None:
            prev.weight_q = prev.weight_q.scaled(ratio)
        prev.meta.pop("bn_origin", None)
        remap[node.id] = prev.id
    output_id = remap.get(g.output_id, g.output_id)
    return ModelGraph(kept, tuple(g.input_shape), output_id)
