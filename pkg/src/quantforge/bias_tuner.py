"""Global label-free fine-tuning of bias vectors only.

Minimizes the distillation cross-entropy between the full-precision teacher's
softmax and the quantized student's softmax on the calibration set, with
plain SGD restricted to fc/conv bias tensors.  Gradients flow through the
activation quantizers via the straight-through rule.  Every other tensor
is bit-identical before and after.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import CalibrationSet, ModelGraph, backward, forward, kd_divergence, softmax
from .optim import SGD


class BiasTuneError(RuntimeError):
    pass


@dataclass
class BiasTuneConfig:
    iterations: int = 200
    lr: float = 0.1
    batch_size: int = 50
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if min(self.iterations, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError("bias tuning config values must be positive")


def bias_tune(
    g_quant: ModelGraph, g_fp: ModelGraph, calib: CalibrationSet, cfg: BiasTuneConfig
) -> ModelGraph:
    """Return a copy of g_quant with only its biases moved.

    Best-checkpoint tracking guarantees the returned model's calibration
    distillation loss never exceeds the initial one.
    """
    g = g_quant.copy()
    teacher_logits = forward(g_fp, calib.inputs, use_quant=False)
    teacher_probs = softmax(teacher_logits)
    bias_nodes = [n for n in g.nodes if n.is_weight_layer()]
    biases = [n.params["bias"] for n in bias_nodes]
    optimizer = SGD([{"params": biases, "lr": cfg.lr}])

    def full_loss() -> float:
        return kd_divergence(teacher_logits, forward(g, calib.inputs, use_quant=True))

    initial = full_loss()
    best_loss = initial
    best_biases = [b.copy() for b in biases]

    rng = np.random.default_rng(cfg.seed)
    n = calib.size
    order = rng.permutation(n)
    cursor = 0
    for it in range(cfg.iterations):
        take = min(cfg.batch_size, n)
        if cursor + take > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + take]
        cursor += take
        xb = calib.inputs[idx]

        logits = forward(g, xb, use_quant=True)
        loss = kd_divergence(teacher_logits[idx], logits)
        if not np.isfinite(loss):
            raise BiasTuneError("bias tuning loss became non-finite")
        grad_logits = ((softmax(logits) - teacher_probs[idx]) / len(idx)).astype(np.float32)
        param_grads, _ = backward(g, xb, grad_logits, use_quant=True)
        optimizer.step([[param_grads[node.id]["bias"] for node in bias_nodes]])

        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations:
            loss_now = full_loss()
            if loss_now < best_loss:
                best_loss = loss_now
                best_biases = [b.copy() for b in biases]

    for node, best in zip(bias_nodes, best_biases):
        node.params["bias"] = best
    return g
