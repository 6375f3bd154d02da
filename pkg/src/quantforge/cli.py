"""Command line interface.

Subcommands: adaquant, allocate, bn-tune, bias-tune, pipeline.
Exit code 0 on success, 2 with a diagnostic on any module error.
The QUANTFORGE_SEED environment variable overrides config seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adaquant import AdaQuantConfig, adaquant_parallel, adaquant_sequential, apply_calibration
from .allocator import (
    BitConfig,
    SensitivityTable,
    compression_ratio,
    greedy_accuracy,
    greedy_compression,
    solve_ip,
)
from .archive import load_archive, save_archive
from .bias_tuner import BiasTuneConfig, bias_tune
from .bn_tuner import refuse_bn, tune_bn
from .graph import evaluate
from .pipeline import PipelineConfig, run_advanced, run_light


def _parse_bits(text: str) -> tuple[int, ...]:
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(b) for b in text.split(","))


def _load_bitcfg(path, g) -> dict[str, tuple[int, int]]:
    with open(path) as fh:
        raw = json.load(fh)
    if "uniform" in raw:
        bits = int(raw["uniform"])
        return {n.id: (bits, bits) for n in g.weight_layers()}
    layers = raw.get("layers", raw)
    return {layer: (int(kn[0]), int(kn[1])) for layer, kn in layers.items()}


def _seed_override(seed: int) -> int:
    env = os.environ.get("QUANTFORGE_SEED")
    return int(env) if env is not None else seed


def _cmd_adaquant(args) -> int:
    g = load_archive(args.model)
    calib = load_archive(args.calib)
    bitcfg = _load_bitcfg(args.bits, g)
    cfg = AdaQuantConfig(seed=_seed_override(args.seed))
    runner = adaquant_parallel if args.mode == "parallel" else adaquant_sequential
    results = runner(g, calib, bitcfg, cfg)
    lines = ["layer,initial_mse,final_mse"]
    lines += [f"{r.layer_id},{r.initial_mse!r},{r.final_mse!r}" for r in results]
    text = "\n".join(lines)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if args.out:
        save_archive(apply_calibration(g, results), args.out)
    return 0


def _cmd_allocate(args) -> int:
    table = SensitivityTable.from_csv(args.table)
    allowed = _parse_bits(args.bits) if args.bits else None
    if args.greedy == "compression":
        cfg = greedy_compression(table, args.target_ratio)
    elif args.greedy == "accuracy":
        cfg = greedy_accuracy(table, args.target_ratio)
    elif args.budget is not None:
        cfg = solve_ip(table, args.budget, allowed)
    else:
        # sweep budgets until the ratio target is met (params from the table)
        from .pipeline import _solve_allocation  # noqa: PLC0415

        raise SystemExit("allocate with --target-ratio requires --greedy or the pipeline command")
    payload = {"layers": {l: list(kn) for l, kn in cfg.assignments.items()}}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_bn_tune(args) -> int:
    g = load_archive(args.model)
    calib = load_archive(args.calib)
    from .bn_tuner import reconstruct_bn

    g = refuse_bn(tune_bn(reconstruct_bn(g), calib, args.iters))
    save_archive(g, args.out)
    print(f"bn-tuned model written to {args.out}")
    return 0


def _cmd_bias_tune(args) -> int:
    g = load_archive(args.model)
    teacher = load_archive(args.teacher)
    calib = load_archive(args.calib)
    cfg = BiasTuneConfig(seed=_seed_override(args.seed))
    out = bias_tune(g, teacher, calib, cfg)
    save_archive(out, args.out)
    print(f"bias-tuned model written to {args.out}")
    return 0


def _cmd_pipeline(args) -> int:
    g = load_archive(args.model)
    calib = load_archive(args.calib)
    holdout = load_archive(args.holdout) if args.holdout else None
    choice_bits = PipelineConfig.relaxed_bits() if args.relaxed_bits else _parse_bits(args.bits)
    cfg = PipelineConfig(
        mode=args.mode,
        base_bits=args.base_bits,
        choice_bits=choice_bits,
        budget=args.budget,
        target_ratio=args.target_ratio,
        exempt_first_last=not args.no_exempt,
        seed=_seed_override(args.seed),
    )
    runner = run_light if args.mode == "light" else run_advanced
    model, report = runner(g, calib, cfg, holdout=holdout)
    if args.report:
        if args.report.endswith(".json"):
            report.to_json(args.report)
        else:
            report.to_csv(args.report)
    if args.out:
        save_archive(model, args.out)
    metrics = evaluate(model, calib)
    print(
        f"mode={report.mode} ratio={report.ratio:.4f} kd_loss={report.calib_kd_loss:.6f} "
        f"kd_top1={report.calib_kd_top1} top1={metrics.top1}"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="quantforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("adaquant", help="layerwise calibration")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--bits", required=True, help="bit config JSON")
    p.add_argument("--mode", choices=["parallel", "sequential"], default="parallel")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_adaquant)

    p = sub.add_parser("allocate", help="solve the bit allocation")
    p.add_argument("--table", required=True, help="sensitivity CSV")
    p.add_argument("--budget", type=float)
    p.add_argument("--target-ratio", type=float)
    p.add_argument("--bits", help="allowed bits, e.g. 4,8 or 2..8")
    p.add_argument("--greedy", choices=["compression", "accuracy"])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_allocate)

    p = sub.add_parser("bn-tune", help="reconstruct, tune and re-fuse batch norms")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bn_tune)

    p = sub.add_parser("bias-tune", help="label-free bias fine-tuning")
    p.add_argument("--model", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bias_tune)

    p = sub.add_parser("pipeline", help="full light/advanced flow")
    p.add_argument("--mode", choices=["light", "advanced"], required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--holdout")
    p.add_argument("--base-bits", type=int, default=8)
    p.add_argument("--bits", default="4,8", help="candidate bits, e.g. 4,8")
    p.add_argument("--relaxed-bits", action="store_true", help="allow any bit-width in 2..8")
    p.add_argument("--budget", type=float)
    p.add_argument("--target-ratio", type=float)
    p.add_argument("--no-exempt", action="store_true", help="quantize first/last layers too")
    p.add_argument("--report")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_pipeline)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface module errors as diagnostics, not tracebacks
        print(f"quantforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
