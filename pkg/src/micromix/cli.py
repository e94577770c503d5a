"""Command-line interface: calibrate -> quantize -> gemm -> analyze."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from micromix import io
from micromix.calib import CalibStats, accumulate, build_plan
from micromix.errors import MxError, PlanMismatchError, ShapeError
from micromix.formats import EIGHT_BIT_FORMATS, SIX_BIT_FORMATS
from micromix.gemm import (
    MixedActivation,
    QuantizedLinear,
    fake_quant_gemm_reference,
    mixed_gemm,
    quantize_linear,
    reorder_and_quantize,
)
from micromix.report import analyze_csv, bits_report, format_table_text


def _samples(arr: np.ndarray, path: str):
    if arr.ndim == 2:
        return [arr]
    if arr.ndim == 3:
        return list(arr)
    raise ShapeError(f"{path}: expected a rank-2 or rank-3 tensor, got rank {arr.ndim}")


def _stats_from_files(paths, layer: str) -> CalibStats:
    stats = None
    for path in paths:
        for sample in _samples(io.read_tensor(path), path):
            if stats is None:
                stats = CalibStats.empty(layer, sample.shape[1])
            stats = accumulate(stats, sample)
    return stats


def cmd_calibrate(args) -> int:
    stats = _stats_from_files(args.inputs, args.layer)
    plan = build_plan(stats)
    io.write_plan(args.out, plan, stats)
    print(f"{plan.layer_id}: n4={plan.n4} n6={plan.n6} n8={plan.n8} -> {args.out}", file=sys.stderr)
    return 0


def cmd_quantize(args) -> int:
    plan = io.read_plan(args.plan)
    x = io.read_tensor(args.tensor)
    if args.weight:
        obj = quantize_linear(x, plan, args.fmt6, args.fmt8)
    else:
        obj = reorder_and_quantize(x, plan, args.fmt6, args.fmt8)
    io.write_quant(args.out, obj, plan)
    return 0


def cmd_gemm(args) -> int:
    a, a_plan = io.read_quant(args.activation)
    w, w_plan = io.read_quant(args.weight)
    if not isinstance(a, MixedActivation):
        raise PlanMismatchError(f"{args.activation} holds a weight, expected an activation")
    if not isinstance(w, QuantizedLinear):
        raise PlanMismatchError(f"{args.weight} holds an activation, expected a weight")
    if a_plan != w_plan:
        raise PlanMismatchError("activation and weight were quantized with different plans")
    io.write_tensor(args.out, mixed_gemm(a, w).to_float32())
    return 0


def cmd_reference(args) -> int:
    plan = io.read_plan(args.plan)
    y = fake_quant_gemm_reference(io.read_tensor(args.activation), io.read_tensor(args.weight), plan, args.fmt6, args.fmt8)
    io.write_tensor(args.out, y.to_float32())
    return 0


def cmd_analyze(args) -> int:
    plan = io.read_plan(args.plan)
    stats = _stats_from_files([args.tensor], plan.layer_id)
    if stats.num_channels != plan.num_channels:
        raise ShapeError(f"{args.tensor} has {stats.num_channels} channels, plan expects {plan.num_channels}")
    text = analyze_csv(plan, stats)
    if args.out:
        io.atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    plan = io.read_plan(args.plan)
    print(json.dumps(bits_report(plan, args.out_features).as_dict()))
    return 0


def cmd_formats(args) -> int:
    sys.stdout.write(format_table_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micromix", description="MX mixed-precision quantization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="build a channel plan from calibration tensors")
    p.add_argument("inputs", nargs="+", help=".mxtf activations (rows x channels, or samples x rows x channels)")
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True, help="plan JSON path")
    p.set_defaults(func=cmd_calibrate)

    def add_formats(p):
        p.add_argument("--fmt6", default="E3M2", choices=SIX_BIT_FORMATS)
        p.add_argument("--fmt8", default="E4M3", choices=EIGHT_BIT_FORMATS)

    p = sub.add_parser("quantize", help="reorder-and-quantize an activation (or a weight with --weight)")
    p.add_argument("tensor")
    p.add_argument("plan")
    add_formats(p)
    p.add_argument("--weight", action="store_true", help="treat the tensor as a K x N weight")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("gemm", help="mixed-precision GEMM of two quant files")
    p.add_argument("activation")
    p.add_argument("weight")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gemm)

    p = sub.add_parser("reference", help="dequantize-first oracle GEMM from dense tensors")
    p.add_argument("activation")
    p.add_argument("weight")
    p.add_argument("plan")
    add_formats(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("analyze", help="per-channel CSV of statistics, groups and threshold violations")
    p.add_argument("tensor")
    p.add_argument("plan")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="average bits and weight memory for a plan")
    p.add_argument("plan")
    p.add_argument("--out-features", type=int, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("formats", help="print format parameters and code-point tables")
    p.set_defaults(func=cmd_formats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MxError, OSError, ValueError) as exc:
        print(f"micromix {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
