"""Per-layer bit allocation.

Measures each layer's loss sensitivity and performance gain per precision
choice, then solves the resulting multiple-choice knapsack exactly: maximize
total performance gain subject to a total loss-degradation budget, picking
exactly one (weight-bits, act-bits) choice per layer.  The solver is an exact
Pareto-frontier dynamic program over real-valued losses/gains (no loss-axis
discretization), exhaustive in effect but pruned by dominance, with
deterministic tie-breaking: smaller total loss first, then lexicographically
smaller bits in layer order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import CalibrationSet, ModelGraph, evaluate, forward
from .quantizer import PASSTHROUGH_BITS, QuantParams, init_minmax


class AllocationError(ValueError):
    pass


@dataclass
class ChoiceEntry:
    layer: str
    w_bits: int
    a_bits: int
    dloss: float
    dperf: float


@dataclass
class SensitivityTable:
    entries: dict[str, list[ChoiceEntry]]
    ref_loss: float
    base_bits: int
    layer_params: dict[str, int] = field(default_factory=dict)

    def layers(self) -> list[str]:
        return list(self.entries)

    def base_entry(self, layer: str) -> ChoiceEntry:
        for e in self.entries[layer]:
            if e.w_bits == self.base_bits and e.a_bits == self.base_bits:
                return e
        raise AllocationError(f"layer {layer!r} has no base-precision choice")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "k", "n", "dloss", "dperf"])
            for layer in self.entries:
                for e in self.entries[layer]:
                    writer.writerow([e.layer, e.w_bits, e.a_bits, repr(e.dloss), repr(e.dperf)])

    @classmethod
    def from_csv(cls, path, ref_loss: float = 0.0) -> "SensitivityTable":
        entries: dict[str, list[ChoiceEntry]] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                e = ChoiceEntry(
                    layer=row["layer"],
                    w_bits=int(row["k"]),
                    a_bits=int(row["n"]),
                    dloss=float(row["dloss"]),
                    dperf=float(row["dperf"]),
                )
                entries.setdefault(e.layer, []).append(e)
        base_bits = None
        for layer, choices in entries.items():
            for e in choices:
                if e.dloss == 0.0 and e.dperf == 0.0:
                    base_bits = e.w_bits
                    break
            if base_bits is not None:
                break
        if base_bits is None:
            raise AllocationError("cannot identify the base-precision choice in CSV")
        layer_params = {}
        for layer, choices in entries.items():
            for e in choices:
                if e.w_bits != base_bits and e.dperf > 0:
                    layer_params[layer] = int(round(e.dperf / (base_bits - e.w_bits)))
                    break
        return cls(entries=entries, ref_loss=ref_loss, base_bits=base_bits, layer_params=layer_params)


@dataclass
class BitConfig:
    assignments: dict[str, tuple[int, int]]

    def weight_bits(self, layer: str) -> int:
        return self.assignments[layer][0]

    def act_bits(self, layer: str) -> int:
        return self.assignments[layer][1]


def compression_ratio(g: ModelGraph, cfg: BitConfig) -> float:
    """Weight-bits of the configured model over the 32-bit baseline."""
    layers = g.weight_layers()
    total = sum(n.n_weight_params() for n in layers)
    packed = 0.0
    for n in layers:
        if n.id not in cfg.assignments:
            raise AllocationError(f"bit config does not cover layer {n.id!r}")
        packed += n.n_weight_params() * cfg.weight_bits(n.id)
    return packed / (32.0 * total)


def _ratio(layer_params: dict[str, int], bits: dict[str, int]) -> float:
    total = sum(layer_params.values())
    return sum(layer_params[l] * bits[l] for l in layer_params) / (32.0 * total)


# ---------------------------------------------------------------------------
# Exact solver
# ---------------------------------------------------------------------------


def _pareto(cands: list[tuple[float, float]]) -> list[tuple[float, float]]:
    cands.sort(key=lambda t: (t[0], -t[1]))
    out: list[tuple[float, float]] = []
    best_perf = -math.inf
    for loss, perf in cands:
        if perf > best_perf:
            out.append((loss, perf))
            best_perf = perf
    return out


def _layer_choice_lists(
    table: SensitivityTable, allowed_bits
) -> list[tuple[str, list[ChoiceEntry]]]:
    layers = []
    for layer, choices in table.entries.items():
        usable = [
            e
            for e in sorted(choices, key=lambda e: (e.w_bits, e.a_bits))
            if math.isfinite(e.dloss)
            and (allowed_bits is None or (e.w_bits in allowed_bits and e.a_bits in allowed_bits))
        ]
        if not usable:
            raise AllocationError(f"layer {layer!r} has no usable precision choice")
        layers.append((layer, usable))
    return layers


class _Frontiers:
    """Suffix Pareto frontiers for a fixed table/allowed-bits selection."""

    def __init__(self, table: SensitivityTable, allowed_bits=None):
        self.layers = _layer_choice_lists(table, allowed_bits)
        n = len(self.layers)
        # prefix minimal loss, used only for conservative budget pruning
        self.prefix_min = [0.0] * (n + 1)
        for i, (_, choices) in enumerate(self.layers):
            self.prefix_min[i + 1] = self.prefix_min[i] + min(e.dloss for e in choices)
        self.suffix: list[list[tuple[float, float]]] = [[] for _ in range(n + 1)]
        self.suffix[n] = [(0.0, 0.0)]

    def build(self, budget: float) -> None:
        slack = 1e-9 * (1.0 + abs(budget))
        n = len(self.layers)
        for i in reversed(range(n)):
            cap = budget - self.prefix_min[i] + slack
            cands = []
            for e in self.layers[i][1]:
                for l2, p2 in self.suffix[i + 1]:
                    s = e.dloss + l2
                    if s <= cap:
                        cands.append((s, p2 + e.dperf))
            self.suffix[i] = _pareto(cands)

    def best(self, budget: float) -> tuple[float, float]:
        chosen = None
        for loss, perf in self.suffix[0]:
            if loss <= budget:
                chosen = (loss, perf)  # frontier is perf-ascending; last feasible wins
        if chosen is None:
            raise AllocationError("integer program infeasible for this budget")
        return chosen

    def reconstruct(self, target: tuple[float, float]) -> BitConfig:
        assignments: dict[str, tuple[int, int]] = {}
        lt, pt = target
        for i, (layer, choices) in enumerate(self.layers):
            found = False
            for e in choices:  # lexicographic (k, n) order = deterministic tie-break
                for l2, p2 in self.suffix[i + 1]:
                    if e.dloss + l2 == lt and e.dperf + p2 == pt:
                        assignments[layer] = (e.w_bits, e.a_bits)
                        lt, pt = l2, p2
                        found = True
                        break
                if found:
                    break
            if not found:  # pragma: no cover - construction guarantees a match
                raise AllocationError("frontier reconstruction failed")
        return BitConfig(assignments)


def solve_ip(table: SensitivityTable, budget: float, allowed_bits=None) -> BitConfig:
    """Exact optimum of the per-layer bit allocation under a loss budget."""
    if budget < 0:
        raise AllocationError("budget must be non-negative")
    fr = _Frontiers(table, allowed_bits)
    fr.build(budget)
    return fr.reconstruct(fr.best(budget))


def config_totals(table: SensitivityTable, cfg: BitConfig) -> tuple[float, float]:
    """Canonical (total_dloss, total_dperf) sums of a config, in layer order."""
    dl = 0.0
    dp = 0.0
    for layer, choices in table.entries.items():
        k, n = cfg.assignments[layer]
        entry = next(e for e in choices if e.w_bits == k and e.a_bits == n)
        dl += entry.dloss
        dp += entry.dperf
    return dl, dp


def solve_ip_sweep(table: SensitivityTable, budgets, allowed_bits=None):
    """Solve for several budgets, reusing one frontier build.

    Returns [(budget, BitConfig, total_dperf, total_dloss)] with the
    objective non-decreasing in the budget.
    """
    budgets = list(budgets)
    fr = _Frontiers(table, allowed_bits)
    fr.build(max(budgets))
    out = []
    for budget in budgets:
        cfg = fr.reconstruct(fr.best(budget))
        dl, dp = config_totals(table, cfg)
        out.append((budget, cfg, dp, dl))
    return out


# ---------------------------------------------------------------------------
# Greedy baselines
# ---------------------------------------------------------------------------


def _require_params(table: SensitivityTable) -> dict[str, int]:
    missing = [l for l in table.entries if not table.layer_params.get(l)]
    if missing:
        raise AllocationError(f"layer parameter counts unknown for {missing}")
    return table.layer_params


def greedy_compression(table: SensitivityTable, target_ratio: float) -> BitConfig:
    """Start everything at the lowest precision, then promote layers back to
    base precision from the smallest to the largest while the compression
    target still holds."""
    params = _require_params(table)
    lows = {l: min(cs, key=lambda e: (e.w_bits, e.a_bits)) for l, cs in table.entries.items()}
    chosen = {l: lows[l] for l in table.entries}
    order = sorted(table.entries, key=lambda l: (params[l], list(table.entries).index(l)))
    for layer in order:
        trial = dict(chosen)
        trial[layer] = table.base_entry(layer)
        if _ratio(params, {l: e.w_bits for l, e in trial.items()}) <= target_ratio + 1e-12:
            chosen = trial
        else:
            break
    return BitConfig({l: (e.w_bits, e.a_bits) for l, e in chosen.items()})


def greedy_accuracy(table: SensitivityTable, target_ratio: float) -> BitConfig:
    """Start everything at base precision and demote the most robust layers
    (smallest measured loss increase at their lowest choice) until the
    compression target is reached."""
    params = _require_params(table)
    chosen = {l: table.base_entry(l) for l in table.entries}
    candidates = []
    for idx, (layer, choices) in enumerate(table.entries.items()):
        low = min(choices, key=lambda e: (e.w_bits, e.a_bits))
        if low.w_bits != table.base_bits or low.a_bits != table.base_bits:
            candidates.append((low.dloss, idx, layer, low))
    candidates.sort(key=lambda t: (t[0], t[1]))
    for _, _, layer, low in candidates:
        if _ratio(params, {l: e.w_bits for l, e in chosen.items()}) <= target_ratio + 1e-12:
            break
        chosen[layer] = low
    return BitConfig({l: (e.w_bits, e.a_bits) for l, e in chosen.items()})


# ---------------------------------------------------------------------------
# Sensitivity profiling
# ---------------------------------------------------------------------------


@dataclass
class LayerState:
    """Everything one weight layer needs at a given precision."""

    weight: np.ndarray
    bias: np.ndarray
    weight_q: QuantParams | None
    act_q: QuantParams | None


def minmax_state_provider(g: ModelGraph, calib: CalibrationSet):
    """Default (backprop-free) state provider: full-range quantizers."""
    _, values = forward(g, calib.inputs, use_quant=False, return_values=True)
    acts = {n.id: values[n.inputs[0]] for n in g.weight_layers()}
    cache: dict[tuple[str, int], LayerState] = {}

    def provider(node_id: str, bits: int) -> LayerState:
        key = (node_id, bits)
        if key not in cache:
            node = g.node(node_id)
            if bits == PASSTHROUGH_BITS:
                wq = aq = None
            else:
                wq = init_minmax(node.params["weight"], bits, "per_channel", axis=0)
                aq = init_minmax(acts[node_id], bits)
            cache[key] = LayerState(node.params["weight"], node.params["bias"], wq, aq)
        return cache[key]

    return provider


def states_from_calibration(g: ModelGraph, results_by_bits: dict[int, list]) -> callable:
    """State provider backed by per-precision layerwise calibration results."""
    table: dict[tuple[str, int], LayerState] = {}
    for bits, results in results_by_bits.items():
        for res in results:
            node = g.node(res.layer_id)
            table[(res.layer_id, bits)] = LayerState(
                weight=(node.params["weight"] + res.weight_delta).astype(np.float32),
                bias=(node.params["bias"] + res.bias_delta).astype(np.float32),
                weight_q=res.weight_q,
                act_q=res.act_q,
            )

    def provider(node_id: str, bits: int) -> LayerState:
        if bits == PASSTHROUGH_BITS:
            node = g.node(node_id)
            return LayerState(node.params["weight"], node.params["bias"], None, None)
        return table[(node_id, bits)]

    return provider


class Profiler:
    """Evaluates the calibration loss of one-layer-lowered (or arbitrary
    per-layer-bits) models against the full-precision teacher."""

    def __init__(self, g: ModelGraph, calib: CalibrationSet, base_bits: int, states=None):
        self.calib = calib
        self.base_bits = base_bits
        self.g = g.copy()
        self.g.infer_shapes()
        self.states = states if states is not None else minmax_state_provider(self.g, calib)
        self.teacher = forward(self.g, calib.inputs, use_quant=False)
        _, fp_values = forward(self.g, calib.inputs, use_quant=False, return_values=True)
        for node in self.g.nodes:
            if node.kind == "add" and base_bits != PASSTHROUGH_BITS:
                node.act_q = init_minmax(fp_values[node.id], base_bits)
        self._apply({n.id: base_bits for n in self.g.weight_layers()})
        self.ref_loss = self.loss({})

    def _apply(self, bits_map: dict[str, int]) -> None:
        for node_id, bits in bits_map.items():
            state = self.states(node_id, bits)
            node = self.g.node(node_id)
            node.params["weight"] = state.weight.copy()
            node.params["bias"] = state.bias.copy()
            node.weight_q = state.weight_q.copy() if state.weight_q else None
            node.act_q = state.act_q.copy() if state.act_q else None

    def loss(self, overrides: dict[str, int]) -> float:
        self._apply(overrides)
        report = evaluate(self.g, self.calib, reference_outputs=self.teacher)
        self._apply({layer: self.base_bits for layer in overrides})
        return report.kd_loss

    def metrics(self, overrides: dict[str, int]):
        self._apply(overrides)
        report = evaluate(self.g, self.calib, reference_outputs=self.teacher)
        self._apply({layer: self.base_bits for layer in overrides})
        return report


def profile_sensitivity(
    g: ModelGraph,
    calib: CalibrationSet,
    base_bits: int,
    choice_bits,
    states=None,
    exempt=(),
) -> SensitivityTable:
    """One-layer-lowered sensitivity measurement.

    Every layer gets the base choice (dloss=0, dperf=0); non-exempt layers
    additionally get one choice per entry of ``choice_bits`` with the measured
    loss delta and the parameter-bits saved.  A non-finite measured loss
    flags the choice with +inf so the solver can never select it.
    """
    prof = Profiler(g, calib, base_bits, states=states)
    entries: dict[str, list[ChoiceEntry]] = {}
    layer_params: dict[str, int] = {}
    for node in prof.g.weight_layers():
        n_params = node.n_weight_params()
        layer_params[node.id] = n_params
        choices = [ChoiceEntry(node.id, base_bits, base_bits, 0.0, 0.0)]
        if node.id not in exempt:
            for bits in sorted(set(choice_bits)):
                if bits == base_bits:
                    continue
                loss = prof.loss({node.id: bits})
                dloss = loss - prof.ref_loss if math.isfinite(loss) else math.inf
                choices.append(
                    ChoiceEntry(node.id, bits, bits, dloss, float(n_params * (base_bits - bits)))
                )
        entries[node.id] = sorted(choices, key=lambda e: (e.w_bits, e.a_bits))
    return SensitivityTable(
        entries=entries, ref_loss=prof.ref_loss, base_bits=base_bits, layer_params=layer_params
    )


def additivity_diagnostic(
    g: ModelGraph,
    calib: CalibrationSet,
    table: SensitivityTable,
    n_configs: int = 20,
    seed: int = 0,
    states=None,
):
    """Check that summed per-layer loss deltas track jointly measured deltas.

    Samples random per-layer bit configurations from the table's choices,
    measures each jointly, and returns (pearson_r, rows) where rows hold
    (predicted_sum, measured) pairs.  Supports the small-perturbation
    additivity assumption behind the integer program; treat the correlation
    threshold as a soft gate.
    """
    prof = Profiler(g, calib, table.base_bits, states=states)
    rng = np.random.default_rng(seed)
    layers = table.layers()
    predicted = []
    measured = []
    seen = set()
    attempts = 0
    while len(predicted) < n_configs and attempts < 50 * n_configs:
        attempts += 1
        config = tuple(
            rng.choice([e.w_bits for e in table.entries[layer]]) for layer in layers
        )
        if config in seen:
            continue
        seen.add(config)
        pred = 0.0
        for layer, bits in zip(layers, config):
            entry = next(e for e in table.entries[layer] if e.w_bits == bits)
            pred += entry.dloss
        joint = prof.loss({layer: int(bits) for layer, bits in zip(layers, config)})
        predicted.append(pred)
        measured.append(joint - prof.ref_loss)
    r = float(np.corrcoef(predicted, measured)[0, 1])
    return r, list(zip(predicted, measured))
