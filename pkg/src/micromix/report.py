"""Bit-width accounting and per-channel analysis tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from micromix.calib import CalibStats, ChannelPlan
from micromix.formats import BLOCK_SIZE, SCALE_BITS

SCALE_OVERHEAD_BITS = SCALE_BITS / BLOCK_SIZE

ANALYZE_COLUMNS = (
    "channel",
    "position",
    "abs_mean",
    "abs_max",
    "group_bits",
    "t4",
    "t6",
    "fits_fp4",
    "fits_fp6",
    "violation",
)


def avg_bits(plan: ChannelPlan) -> float:
    """Average stored bits per element, including the amortised E8M0 scale."""
    n4, n6, n8 = plan.counts
    return (4 * n4 + 6 * n6 + 8 * n8) / (n4 + n6 + n8) + SCALE_OVERHEAD_BITS


@dataclass
class BitsReport:
    layer_id: str
    avg_bits: float
    memory_bytes: int
    proportions: tuple[float, float, float]

    def as_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "avg_bits": self.avg_bits,
            "memory_bytes": self.memory_bytes,
            "proportions": list(self.proportions),
        }


def bits_report(plan: ChannelPlan, out_features: int) -> BitsReport:
    """Storage of the layer's quantized weight (padded K x ``out_features``)."""
    n4, n6, n8 = plan.counts
    element_bits = (4 * n4 + 6 * n6 + 8 * n8) * out_features
    scale_bytes = plan.padded_channels // BLOCK_SIZE * out_features
    memory = -(-element_bits // 8) + scale_bytes
    return BitsReport(plan.layer_id, avg_bits(plan), memory, plan.proportions)


def analyze_rows(plan: ChannelPlan, stats: CalibStats) -> list[dict]:
    """One record per source channel with its statistics and assigned group."""
    th = plan.thresholds
    groups = plan.group_of_channel()
    position = plan.inverse_permutation()
    rows = []
    for c in range(plan.num_channels):
        cmax = float(stats.channel_abs_max[c])
        g = int(groups[c])
        limit = {4: th.t4, 6: th.t6}.get(g)
        rows.append(
            {
                "channel": c,
                "position": int(position[c]),
                "abs_mean": float(stats.channel_abs_mean[c]),
                "abs_max": cmax,
                "group_bits": g,
                "t4": th.t4,
                "t6": th.t6,
                "fits_fp4": int(cmax <= th.t4),
                "fits_fp6": int(cmax <= th.t6),
                "violation": int(limit is not None and cmax > limit),
            }
        )
    return rows


def analyze_csv(plan: ChannelPlan, stats: CalibStats) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ANALYZE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in analyze_rows(plan, stats):
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def format_table_text() -> str:
    """Human-readable format parameters followed by every format's code points."""
    from micromix.formats import FAMILY, FORMATS

    lines = ["format  family  bits  exp  man  bias  q_max      block  scale"]
    for f in FORMATS.values():
        lines.append(
            f"{f.name:<7} {FAMILY[f.name]:<7} {f.element_bits:>4} {f.exponent_bits:>4} {f.mantissa_bits:>4}"
            f" {f.bias:>5}  {float(f.q_max):<10g} {f.block_size:>5}  E8M0/{f.scale_bits}"
        )
    for f in FORMATS.values():
        lines.append("")
        lines.append(f"{f.name} non-negative values: {f.positive_values.tolist()}")
        lines.append(f"{f.name} code points (code: value)")
        for code, value in enumerate(f.code_values.tolist()):
            lines.append(f"  0x{code:02x} {code:0{f.element_bits}b}: {value!r}")
    return "\n".join(lines) + "\n"


def positive_value_list(name: str) -> list[float]:
    from micromix.formats import get_format

    return [float(v) for v in np.asarray(get_format(name).positive_values)]
