"""Model graph: sequential-with-residuals DAG of typed layers.

Activation quantizers live on the consumer side: every fc/conv node carries
``act_q`` applied to its own input, and every add node carries ``act_q``
applied to its output.  Weight quantizers (``weight_q``) live on fc/conv
nodes.  A node with no quantizer (or bits=32) runs in full precision.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .quantizer import QuantParams, quantize, ste_backward

INPUT_ID = "__input__"
WEIGHT_KINDS = ("fc", "conv2d")


class GraphError(ValueError):
    pass


@dataclass
class LayerNode:
    id: str
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    spec: object | None = None
    inputs: list[str] = field(default_factory=list)
    weight_q: QuantParams | None = None
    act_q: QuantParams | None = None
    meta: dict = field(default_factory=dict)

    def is_weight_layer(self) -> bool:
        return self.kind in WEIGHT_KINDS

    def n_weight_params(self) -> int:
        return int(self.params["weight"].size) if self.is_weight_layer() else 0


@dataclass
class ModelGraph:
    nodes: list[LayerNode]
    input_shape: tuple[int, ...]
    output_id: str

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for node in self.nodes:
            if node.kind not in tc.SUPPORTED_KINDS:
                raise GraphError(f"unsupported layer kind {node.kind!r} in node {node.id!r}")
            if node.id in seen or node.id == INPUT_ID:
                raise GraphError(f"duplicate node id {node.id!r}")
            want = 2 if node.kind == "add" else 1
            if len(node.inputs) != want:
                raise GraphError(f"node {node.id!r} needs {want} input(s), has {len(node.inputs)}")
            for ref in node.inputs:
                if ref != INPUT_ID and ref not in seen:
                    raise GraphError(
                        f"node {node.id!r} references {ref!r} before definition "
                        "(graph must be stored in topological order)"
                    )
            seen.add(node.id)
        if self.output_id not in seen:
            raise GraphError(f"output node {self.output_id!r} not present")

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def weight_layers(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.is_weight_layer()]

    def copy(self) -> "ModelGraph":
        nodes = []
        for n in self.nodes:
            nodes.append(
                LayerNode(
                    id=n.id,
                    kind=n.kind,
                    params={k: v.copy() for k, v in n.params.items()},
                    spec=n.spec,
                    inputs=list(n.inputs),
                    weight_q=n.weight_q.copy() if n.weight_q else None,
                    act_q=n.act_q.copy() if n.act_q else None,
                    meta=_copy.deepcopy(n.meta),
                )
            )
        return ModelGraph(nodes, tuple(self.input_shape), self.output_id)

    def infer_shapes(self) -> None:
        """Attach per-sample in/out shapes to every node's meta."""
        shapes = {INPUT_ID: tuple(self.input_shape)}
        for node in self.nodes:
            ins = [shapes[i] for i in node.inputs]
            node.meta["in_shape"] = ins[0]
            if node.kind == "fc":
                out = (node.params["weight"].shape[0],)
            elif node.kind == "conv2d":
                c, h, w = ins[0]
                oh, ow = node.spec.out_hw(h, w)
                out = (node.spec.out_channels, oh, ow)
            elif node.kind == "avgpool":
                c, h, w = ins[0]
                out = (c, h // node.spec.kernel, w // node.spec.kernel)
            elif node.kind == "flatten":
                out = (int(np.prod(ins[0])),)
            elif node.kind == "add":
                if ins[0] != ins[1]:
                    raise GraphError(f"add node {node.id!r} input shapes differ: {ins}")
                out = ins[0]
            else:
                out = ins[0]
            node.meta["out_shape"] = out
            shapes[node.id] = out


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] < 1:
            raise ValueError("calibration set must contain at least one sample")
        if self.labels is not None and len(self.labels) != self.inputs.shape[0]:
            raise ValueError("labels length must match the number of inputs")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class MetricsReport:
    kd_loss: float
    kd_top1: float | None = None
    ce_loss: float | None = None
    top1: float | None = None
    activations: dict[str, np.ndarray] | None = None


def forward(g: ModelGraph, x: np.ndarray, use_quant: bool = True, return_values: bool = False):
    """Evaluate the graph on a batch.  With use_quant=False all quantizers
    are ignored (full-precision reference path)."""
    values: dict[str, np.ndarray] = {INPUT_ID: x}
    for node in g.nodes:
        if node.is_weight_layer():
            xin = values[node.inputs[0]]
            if use_quant and node.act_q is not None:
                xin = quantize(xin, node.act_q)
            w = node.params["weight"]
            if use_quant and node.weight_q is not None:
                w = quantize(w, node.weight_q)
            shadow = _ShadowNode(node, {"weight": w, "bias": node.params["bias"]})
            y = tc.layer_forward(shadow, xin)
        elif node.kind == "add":
            y = tc.layer_forward(node, [values[i] for i in node.inputs])
            if use_quant and node.act_q is not None:
                y = quantize(y, node.act_q)
        else:
            y = tc.layer_forward(node, values[node.inputs[0]])
        values[node.id] = y
    out = values[g.output_id]
    return (out, values) if return_values else out


class _ShadowNode:
    """Node view with substituted params (used to run quantized weights)."""

    def __init__(self, node: LayerNode, params: dict):
        self.kind = node.kind
        self.spec = node.spec
        self.params = params


def backward(g: ModelGraph, x: np.ndarray, grad_out: np.ndarray, use_quant: bool = True):
    """Backprop through the whole graph.

    Returns (param_grads, grad_input) where param_grads maps node id to a
    dict of gradients w.r.t. that node's own params (through the weight-STE
    when the weights are quantized).
    """
    acts: dict[str, np.ndarray] = {INPUT_ID: x}
    saved: dict[str, dict] = {}
    for node in g.nodes:
        if node.is_weight_layer():
            raw_in = acts[node.inputs[0]]
            xin = quantize(raw_in, node.act_q) if use_quant and node.act_q is not None else raw_in
            w = node.params["weight"]
            w_eff = quantize(w, node.weight_q) if use_quant and node.weight_q is not None else w
            shadow = _ShadowNode(node, {"weight": w_eff, "bias": node.params["bias"]})
            y = tc.layer_forward(shadow, xin)
            saved[node.id] = {"raw_in": raw_in, "xin": xin, "w_eff": w_eff}
        elif node.kind == "add":
            pre = tc.layer_forward(node, [acts[i] for i in node.inputs])
            y = quantize(pre, node.act_q) if use_quant and node.act_q is not None else pre
            saved[node.id] = {"pre": pre}
        else:
            y = tc.layer_forward(node, acts[node.inputs[0]])
        acts[node.id] = y

    grads: dict[str, np.ndarray] = {g.output_id: grad_out}
    param_grads: dict[str, dict[str, np.ndarray]] = {}

    def accumulate(ref: str, val: np.ndarray) -> None:
        if ref in grads:
            grads[ref] = grads[ref] + val
        else:
            grads[ref] = val

    for node in reversed(g.nodes):
        up = grads.get(node.id)
        if up is None:
            continue
        if node.is_weight_layer():
            st = saved[node.id]
            shadow = _ShadowNode(node, {"weight": st["w_eff"], "bias": node.params["bias"]})
            gx, gp = tc.layer_backward(shadow, st["xin"], up)
            if use_quant and node.weight_q is not None:
                gw, _, _ = ste_backward(node.params["weight"], node.weight_q, gp["weight"])
                gp = {"weight": gw, "bias": gp["bias"]}
            if use_quant and node.act_q is not None:
                gx, _, _ = ste_backward(st["raw_in"], node.act_q, gx)
            param_grads[node.id] = gp
            accumulate(node.inputs[0], gx)
        elif node.kind == "add":
            if use_quant and node.act_q is not None:
                up, _, _ = ste_backward(saved[node.id]["pre"], node.act_q, up)
            accumulate(node.inputs[0], up)
            accumulate(node.inputs[1], up)
        else:
            gx, gp = tc.layer_backward(node, acts[node.inputs[0]], up)
            if gp:
                param_grads[node.id] = gp
            accumulate(node.inputs[0], gx)
    return param_grads, grads.get(INPUT_ID)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kd_divergence(teacher_logits: np.ndarray, student_logits: np.ndarray) -> float:
    """Label-free distillation loss between teacher and student softmax.

    Cross-entropy with the constant teacher-entropy offset removed (i.e. the
    KL divergence), so a student that matches the teacher scores exactly 0.
    Gradients w.r.t. the student logits are the usual softmax difference.
    """
    pt = softmax(teacher_logits)
    lt = np.log(np.clip(pt, 1e-30, None))
    ls = np.log(np.clip(softmax(student_logits), 1e-30, None))
    return float((pt * (lt - ls)).sum(axis=1).mean())


def evaluate(
    g: ModelGraph,
    calib: CalibrationSet,
    reference_outputs: np.ndarray | None = None,
    collect_activations: bool = False,
) -> MetricsReport:
    """Quantized-model metrics against a full-precision teacher.

    The teacher logits default to this graph's own non-quantized forward.
    Label cross-entropy/top-1 are reported only when labels are present.
    """
    if collect_activations:
        student, values = forward(g, calib.inputs, use_quant=True, return_values=True)
    else:
        student = forward(g, calib.inputs, use_quant=True)
        values = None
    teacher = (
        reference_outputs
        if reference_outputs is not None
        else forward(g, calib.inputs, use_quant=False)
    )
    report = MetricsReport(kd_loss=kd_divergence(teacher, student))
    report.kd_top1 = float((student.argmax(axis=1) == teacher.argmax(axis=1)).mean())
    if calib.labels is not None:
        labels = calib.labels.astype(np.int64)
        p = softmax(student)
        report.ce_loss = float(-np.log(np.clip(p[np.arange(len(labels)), labels], 1e-30, None)).mean())
        report.top1 = float((student.argmax(axis=1) == labels).mean())
    if collect_activations:
        report.activations = values
    return report


def fuse_conv_bn(g: ModelGraph) -> ModelGraph:
    """Fold every batchnorm into its preceding fc/conv layer.

    The folded layer remembers the original bn affine (gamma, beta, eps) in
    its meta so an identity bn can be reconstructed later.  Function is
    preserved up to float rounding.
    """
    g = g.copy()
    by_id = {n.id: n for n in g.nodes}
    remap: dict[str, str] = {}
    kept: list[LayerNode] = []
    for node in g.nodes:
        node.inputs = [remap.get(i, i) for i in node.inputs]
        if node.kind != "batchnorm2d":
            kept.append(node)
            continue
        prev = by_id.get(node.inputs[0])
        if prev is None or not prev.is_weight_layer():
            raise GraphError(f"batchnorm {node.id!r} does not follow a weight layer")
        eps = float(node.params["eps"])
        gamma = node.params["gamma"].astype(np.float64)
        beta = node.params["beta"].astype(np.float64)
        mean = node.params["mean"].astype(np.float64)
        var = node.params["var"].astype(np.float64)
        factor = gamma / np.sqrt(var + eps)
        w = prev.params["weight"].astype(np.float64)
        w = w * factor.reshape((-1,) + (1,) * (w.ndim - 1))
        b = factor * (prev.params["bias"].astype(np.float64) - mean) + beta
        prev.params["weight"] = w.astype(np.float32)
        prev.params["bias"] = b.astype(np.float32)
        prev.meta["bn_origin"] = {
            "gamma": node.params["gamma"].copy(),
            "beta": node.params["beta"].copy(),
            "eps": eps,
        }
        remap[node.id] = prev.id
    output_id = remap.get(g.output_id, g.output_id)
    return ModelGraph(kept, tuple(g.input_shape), output_id)


def downstream_weight_layer(g: ModelGraph, node_id: str) -> LayerNode | None:
    """First fc/conv layer (topological order) fed, directly or not, by node_id."""
    reach = {node_id}
    for node in g.nodes:
        if any(i in reach for i in node.inputs):
            if node.is_weight_layer():
                return node
            reach.add(node.id)
    return None
