"""End-to-end deployment flows.

light:    fuse -> full-range quant init -> sensitivity profile -> exact bit
          allocation -> bn reconstruct/tune/refuse.  No backward passes.
advanced: adds per-precision layerwise calibration before profiling (so the
          sensitivities reflect post-calibration quality), stitches the
          selected per-precision layers, then bn tuning and bias tuning.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .adaquant import AdaQuantConfig, adaquant_parallel
from .allocator import (
    BitConfig,
    SensitivityTable,
    _Frontiers,
    compression_ratio,
    config_totals,
    minmax_state_provider,
    profile_sensitivity,
    states_from_calibration,
)
from .bias_tuner import BiasTuneConfig, bias_tune
from .bn_tuner import reconstruct_bn, refuse_bn, tune_bn
from .graph import CalibrationSet, ModelGraph, downstream_weight_layer, evaluate, forward, fuse_conv_bn
from .instrumentation import backward_call_count
from .quantizer import PASSTHROUGH_BITS, init_minmax, quantize


@dataclass
class PipelineConfig:
    mode: str = "light"
    base_bits: int = 8
    choice_bits: tuple[int, ...] = (4, 8)
    budget: float | None = None
    target_ratio: float | None = None
    exempt_first_last: bool = True
    seed: int = 0
    bn_iterations: int = 10
    adaquant: AdaQuantConfig = field(default_factory=AdaQuantConfig)
    bias: BiasTuneConfig = field(default_factory=BiasTuneConfig)

    def __post_init__(self):
        if self.mode not in ("light", "advanced"):
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.budget is None and self.target_ratio is None:
            self.budget = 0.0

    @staticmethod
    def relaxed_bits() -> tuple[int, ...]:
        return tuple(range(2, 9))


@dataclass
class Report:
    mode: str
    base_bits: int
    ratio: float
    budget: float | None
    rows: list[dict]
    calib_kd_loss: float
    calib_kd_top1: float | None
    calib_top1: float | None
    holdout_kd_top1: float | None = None
    holdout_top1: float | None = None
    backward_calls: int = 0
    total_dloss: float | None = None
    total_dperf: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True, default=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["layer", "k", "n", "dloss", "dperf", "params"]
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def _with_env_seed(cfg: PipelineConfig) -> PipelineConfig:
    env = os.environ.get("QUANTFORGE_SEED")
    if env is None:
        return cfg
    seed = int(env)
    return replace(
        cfg,
        seed=seed,
        adaquant=replace(cfg.adaquant, seed=seed),
        bias=replace(cfg.bias, seed=seed),
    )


def exempt_layers(g: ModelGraph, cfg: PipelineConfig) -> tuple[str, ...]:
    """First and last weight layers, pinned to base precision when enabled."""
    if not cfg.exempt_first_last:
        return ()
    layers = g.weight_layers()
    ids = {layers[0].id, layers[-1].id}
    return tuple(sorted(ids))


def apply_bit_config(
    g: ModelGraph,
    calib: CalibrationSet,
    cfg_bits: BitConfig,
    states,
    base_bits: int,
) -> ModelGraph:
    """Stitch per-precision layer states into one mixed-precision graph.

    Residual-add outputs get their own full-range quantizer at the activation
    bit-width of the nearest downstream weight layer (base bits when the add
    feeds the output directly).
    """
    g = g.copy()
    g.infer_shapes()
    _, fp_values = forward(g, calib.inputs, use_quant=False, return_values=True)
    for node in g.weight_layers():
        k, _ = cfg_bits.assignments[node.id]
        state = states(node.id, k)
        node.params["weight"] = state.weight.copy()
        node.params["bias"] = state.bias.copy()
        node.weight_q = state.weight_q.copy() if state.weight_q else None
        node.act_q = state.act_q.copy() if state.act_q else None
    for node in g.nodes:
        if node.kind != "add":
            continue
        consumer = downstream_weight_layer(g, node.id)
        bits = cfg_bits.assignments[consumer.id][1] if consumer else base_bits
        node.meta["act_bits"] = bits
        node.act_q = None if bits == PASSTHROUGH_BITS else init_minmax(fp_values[node.id], bits)
    return g


def materialize_lattice_weights(g: ModelGraph) -> ModelGraph:
    """Project quantized layers' stored weights onto their lattice.

    A no-op for the quantized forward path (fake quantization is idempotent);
    it pins the deployed weight tensors to representable values, which keeps
    integer codes stable under the bn re-fuse rescaling.
    """
    g = g.copy()
    for node in g.weight_layers():
        if node.weight_q is not None:
            node.params["weight"] = quantize(node.params["weight"], node.weight_q)
    return g


def round_to_nearest_baseline(
    g: ModelGraph, calib: CalibrationSet, cfg_bits: BitConfig, base_bits: int
) -> ModelGraph:
    """Min-max round-to-nearest model at a given bit configuration."""
    gf = fuse_conv_bn(g)
    gf.infer_shapes()
    states = minmax_state_provider(gf, calib)
    return apply_bit_config(gf, calib, cfg_bits, states, base_bits)


def _solve_allocation(
    table: SensitivityTable, cfg: PipelineConfig, g: ModelGraph
) -> tuple[float, BitConfig, list[str]]:
    notes: list[str] = []
    fr = _Frontiers(table, None)
    hi = sum(
        max(0.0, max(e.dloss for e in choices if np.isfinite(e.dloss)))
        for choices in table.entries.values()
    ) + 1e-9
    if cfg.budget is not None:
        fr.build(cfg.budget)
        return cfg.budget, fr.reconstruct(fr.best(cfg.budget)), notes
    target = cfg.target_ratio
    fr.build(hi)
    lo_cfg = fr.reconstruct(fr.best(0.0))
    if compression_ratio(g, lo_cfg) <= target + 1e-12:
        return 0.0, lo_cfg, notes
    hi_cfg = fr.reconstruct(fr.best(hi))
    if compression_ratio(g, hi_cfg) > target + 1e-12:
        notes.append(
            f"target ratio {target} unreachable; using max-compression configuration"
        )
        return hi, hi_cfg, notes
    lo = 0.0
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        mid_cfg = fr.reconstruct(fr.best(mid))
        if compression_ratio(g, mid_cfg) <= target + 1e-12:
            hi = mid
        else:
            lo = mid
    return hi, fr.reconstruct(fr.best(hi)), notes


def build_report(
    g: ModelGraph,
    calib: CalibrationSet,
    holdout: CalibrationSet | None = None,
    cfg_bits: BitConfig | None = None,
    table: SensitivityTable | None = None,
    mode: str = "",
    base_bits: int = 8,
    budget: float | None = None,
    backward_calls: int = 0,
    notes: list[str] | None = None,
    teacher: ModelGraph | None = None,
) -> Report:
    ref = teacher if teacher is not None else g
    calib_report = evaluate(g, calib, reference_outputs=forward(ref, calib.inputs, use_quant=False))
    rows = []
    total_dl = total_dp = None
    if cfg_bits is not None:
        for node in g.weight_layers():
            k, n = cfg_bits.assignments[node.id]
            row = {
                "layer": node.id,
                "k": k,
                "n": n,
                "dloss": 0.0,
                "dperf": 0.0,
                "params": node.n_weight_params(),
            }
            if table is not None:
                entry = next(
                    e for e in table.entries[node.id] if e.w_bits == k and e.a_bits == n
                )
                row["dloss"], row["dperf"] = entry.dloss, entry.dperf
            rows.append(row)
        if table is not None:
            total_dl, total_dp = config_totals(table, cfg_bits)
        ratio = compression_ratio(g, cfg_bits)
    else:
        ratio = 1.0
    report = Report(
        mode=mode,
        base_bits=base_bits,
        ratio=ratio,
        budget=budget,
        rows=rows,
        calib_kd_loss=calib_report.kd_loss,
        calib_kd_top1=calib_report.kd_top1,
        calib_top1=calib_report.top1,
        backward_calls=backward_calls,
        total_dloss=total_dl,
        total_dperf=total_dp,
        notes=list(notes or []),
    )
    if holdout is not None:
        hold = evaluate(g, holdout, reference_outputs=forward(ref, holdout.inputs, use_quant=False))
        report.holdout_kd_top1 = hold.kd_top1
        report.holdout_top1 = hold.top1
    return report


def _is_passthrough(cfg: PipelineConfig) -> bool:
    return cfg.base_bits == PASSTHROUGH_BITS and set(cfg.choice_bits) <= {PASSTHROUGH_BITS}


def run_light(
    g: ModelGraph, calib: CalibrationSet, cfg: PipelineConfig, holdout: CalibrationSet | None = None
) -> tuple[ModelGraph, Report]:
    cfg = _with_env_seed(cfg)
    start = backward_call_count()
    if _is_passthrough(cfg):
        out = g.copy()
        return out, build_report(out, calib, holdout, mode="light", base_bits=cfg.base_bits)
    gf = fuse_conv_bn(g)
    gf.infer_shapes()
    exempt = exempt_layers(gf, cfg)
    states = minmax_state_provider(gf, calib)
    table = profile_sensitivity(gf, calib, cfg.base_bits, cfg.choice_bits, states=states, exempt=exempt)
    budget, cfg_bits, notes = _solve_allocation(table, cfg, gf)
    gq = apply_bit_config(gf, calib, cfg_bits, states, cfg.base_bits)
    gq = materialize_lattice_weights(gq)
    gq = refuse_bn(tune_bn(reconstruct_bn(gq), calib, cfg.bn_iterations))
    report = build_report(
        gq,
        calib,
        holdout,
        cfg_bits,
        table,
        mode="light",
        base_bits=cfg.base_bits,
        budget=budget,
        backward_calls=backward_call_count() - start,
        notes=notes,
        teacher=gf,
    )
    return gq, report


def run_advanced(
    g: ModelGraph, calib: CalibrationSet, cfg: PipelineConfig, holdout: CalibrationSet | None = None
) -> tuple[ModelGraph, Report]:
    cfg = _with_env_seed(cfg)
    start = backward_call_count()
    if _is_passthrough(cfg):
        out = g.copy()
        return out, build_report(out, calib, holdout, mode="advanced", base_bits=cfg.base_bits)
    gf = fuse_conv_bn(g)
    gf.infer_shapes()
    exempt = exempt_layers(gf, cfg)
    results_by_bits = {}
    for bits in sorted(set(cfg.choice_bits) | {cfg.base_bits}):
        if bits == PASSTHROUGH_BITS:
            continue
        uniform = {n.id: (bits, bits) for n in gf.weight_layers()}
        results_by_bits[bits] = adaquant_parallel(gf, calib, uniform, cfg.adaquant)
    states = states_from_calibration(gf, results_by_bits)
    table = profile_sensitivity(gf, calib, cfg.base_bits, cfg.choice_bits, states=states, exempt=exempt)
    budget, cfg_bits, notes = _solve_allocation(table, cfg, gf)
    gq = apply_bit_config(gf, calib, cfg_bits, states, cfg.base_bits)
    gq = materialize_lattice_weights(gq)
    gq = refuse_bn(tune_bn(reconstruct_bn(gq), calib, cfg.bn_iterations))
    gq = bias_tune(gq, gf, calib, cfg.bias)
    report = build_report(
        gq,
        calib,
        holdout,
        cfg_bits,
        table,
        mode="advanced",
        base_bits=cfg.base_bits,
        budget=budget,
        backward_calls=backward_call_count() - start,
        notes=notes,
        teacher=gf,
    )
    return gq, report
